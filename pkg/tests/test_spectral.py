import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eddylab.spectral import FourierGrid, apply_gradient, biot_savart, dealias, green_convolve

from conftest import smooth_field

TWO_PI = 2 * np.pi


def test_gradient_of_sine(grid32):
    x1, x2 = grid32.points()
    f = np.sin(TWO_PI * (2 * x1 + 3 * x2))
    g = grid32.inverse(apply_gradient(grid32, grid32.forward(f)))
    c = TWO_PI * np.cos(TWO_PI * (2 * x1 + 3 * x2))
    assert np.abs(g[0] - 2 * c).max() < 1e-11
    assert np.abs(g[1] - 3 * c).max() < 1e-11


def test_rotated_gradient_is_divergence_free(grid32):
    fhat = smooth_field(grid32, 1)
    u = apply_gradient(grid32, fhat, rotated=True)
    assert np.abs(grid32.divergence(u)).max() < 1e-12
    # (d2 f, -d1 f)
    g = apply_gradient(grid32, fhat)
    assert np.allclose(u[0], g[1]) and np.allclose(u[1], -g[0])


def test_green_inverts_laplacian(grid32):
    fhat = smooth_field(grid32, 2)
    u = green_convolve(grid32, fhat)
    assert np.abs(-grid32.laplacian(u) - fhat).max() < 1e-13
    assert u[0, 0] == 0


def test_green_rejects_nonzero_mean(grid32):
    fhat = smooth_field(grid32, 3)
    fhat[0, 0] = 0.3
    with pytest.raises(ValueError):
        green_convolve(grid32, fhat)


def test_biot_savart_single_mode(grid32):
    # omega = cos(2 pi x1): psi = -cos/(4 pi^2), v = grad^perp psi = (0, -sin/(2 pi))
    x1, _ = grid32.points()
    v = grid32.inverse(biot_savart(grid32, grid32.forward(np.cos(TWO_PI * x1))))
    assert np.abs(v[0]).max() < 1e-14
    assert np.abs(v[1] + np.sin(TWO_PI * x1) / TWO_PI).max() < 1e-14


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_biot_savart_recovers_vorticity(seed):
    g = FourierGrid(32)
    om = smooth_field(g, seed, kmax=8)
    v = biot_savart(g, om)
    assert np.abs(g.divergence(v)).max() < 1e-12
    assert np.abs(g.perp_div(v) - om).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_dealiased_products_are_exact(seed):
    # band-limited to |k|_inf <= n/3: products of two such fields reproduce after dealiasing
    g = FourierGrid(48)
    a = g.dealias(smooth_field(g, seed, kmax=8))
    b = g.dealias(smooth_field(g, seed + 1, kmax=8))
    prod = g.dealias(g.forward(g.inverse(a) * g.inverse(b)))
    fine = FourierGrid(96)
    # direct: evaluate on a twice finer grid where no aliasing occurs within the band
    x1, x2 = fine.points()
    ea = _eval(g, a, x1, x2)
    eb = _eval(g, b, x1, x2)
    ref = fine.forward(ea * eb)
    ref_band = np.zeros(g.shape, dtype=complex)
    rows = np.r_[0:24, 72:96]
    ref_band[:] = ref[rows][:, :25]
    ref_band = g.dealias(ref_band)
    assert np.abs(prod - ref_band).max() < 1e-12


def _eval(g, fhat, x1, x2):
    full = g.full_spectrum(fhat)
    k = np.fft.fftfreq(g.n, 1.0 / g.n)
    e1 = np.exp(TWO_PI * 1j * np.multiply.outer(k, x1[:, 0]))
    e2 = np.exp(TWO_PI * 1j * np.multiply.outer(k, x2[0, :]))
    return np.einsum("ab,ai,bj->ij", full, e1, e2).real


def test_dealias_removes_high_modes(grid32):
    f = np.ones(grid32.shape, dtype=complex)
    d = dealias(grid32, f)
    assert np.all(d[~grid32.band] == 0) and np.all(d[grid32.band] == 1)


def test_parseval(grid32):
    fhat = smooth_field(grid32, 4, kmax=12)
    f = grid32.inverse(fhat)
    assert np.isclose(grid32.norm2(fhat), np.mean(f**2), rtol=1e-13)
    g = grid32.inverse(grid32.gradient(fhat))
    assert np.isclose(grid32.grad_norm2(fhat), np.mean(g[0] ** 2 + g[1] ** 2), rtol=1e-12)


def test_odd_grid_rejected():
    with pytest.raises(ValueError):
        FourierGrid(33)
