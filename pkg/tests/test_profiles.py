import numpy as np
import pytest
from scipy import integrate, special

from eddylab.profiles import Bump, build_profile, scale_profile

# 1 / (sum of exp(-1/(1 - |x|^2/r^2)) h^2) on a 512^2 periodic grid, r = 0.35
BUMP_CONST_R035 = 17.4984961289162


def test_bump_constant_matches_grid_quadrature():
    assert Bump(0.35).const == pytest.approx(BUMP_CONST_R035, rel=1e-12)


def test_unit_mass_polar():
    b = Bump(0.35)
    mass, _ = integrate.quad(lambda s: 2 * np.pi * s * float(b.radial(s)), 0, b.support, epsabs=1e-14)
    assert abs(mass - 1) < 1e-8


@pytest.mark.parametrize("ell", [1.0, 0.5])
def test_rescaled_mass_on_grid(ell):
    n = 256
    x = (np.arange(n) - n // 2) / n
    x1, x2 = np.meshgrid(x, x, indexing="ij")
    th = scale_profile(build_profile(), ell).theta
    assert abs(th(x1, x2).mean() - 1) < 1e-6


def test_rescaled_mass_gauss_256():
    th = scale_profile(build_profile(), 2.0**-4).theta
    t, w = np.polynomial.legendre.leggauss(256)
    s = 0.5 * (t + 1) * th.support
    mass = np.sum(0.5 * w * th.support * 2 * np.pi * s * th.radial(s))
    assert abs(mass - 1) <= 1e-6


def test_radial_symmetry():
    b = Bump(0.3).rescale(0.5)
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.2, 0.2, (2, 200))
    assert np.abs(b(*p) - b(-p[0], -p[1])).max() <= 1e-14
    ang = rng.uniform(0, 2 * np.pi, 200)
    r = np.hypot(*p)
    assert np.allclose(b(*p), b(r * np.cos(ang), r * np.sin(ang)), rtol=1e-12, atol=0)


def test_support_inside_square():
    b = Bump(0.49)
    assert b(0.49, 0.0) == 0.0 and b(0.0, -0.495) == 0.0
    assert b(0.48, 0.0) > 0


@pytest.mark.parametrize("r", [0.0, 0.5, -0.1, 0.7])
def test_bad_radius(r):
    with pytest.raises(ValueError):
        build_profile("bump", r)


def test_unknown_family():
    with pytest.raises(ValueError):
        build_profile("gauss")


def test_identity_scaling():
    p = build_profile()
    assert scale_profile(p, 1.0) == p


def test_fourier_transform_scaling():
    b = Bump(0.35)
    k = np.array([0.0, 1.0, 3.0, 7.5, 12.0])
    ell = 0.125
    assert np.allclose(b.rescale(ell).fourier(k), b.fourier(ell * k), rtol=1e-13, atol=1e-15)


def test_fourier_against_direct_quadrature():
    b = Bump(0.35).rescale(0.25)
    for k in (0.0, 2.0, 9.0, 20.0):
        ref, _ = integrate.quad(
            lambda s: 2 * np.pi * s * float(b.radial(s)) * special.j0(2 * np.pi * k * s),
            0,
            b.support,
            epsabs=1e-14,
            epsrel=1e-12,
        )
        assert abs(b.fourier(k) - ref) < 1e-11
    assert b.fourier(0.0) == pytest.approx(1.0, abs=1e-12)
