"""Fourier calculus on the unit periodic square.

Fields are stored as real-FFT coefficient arrays of shape ``(..., n, n//2 + 1)``
normalized so that ``fhat[k] = integral of f(x) exp(-2 pi i k.x) dx`` over the
torus. Any leading axes are treated as a batch.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi


class FourierGrid:
    """Uniform n x n collocation grid on the torus with FFT helpers.

    Grid points are ``x_j = j / n``; ``centered()`` returns the same points as
    minimal images in ``[-1/2, 1/2)``.
    """

    def __init__(self, n: int, workers: int = 1):
        if n < 4 or n % 2:
            raise ValueError(f"grid size must be an even integer >= 4, got {n}")
        self.n = int(n)
        self.workers = int(workers)
        self.shape = (self.n, self.n // 2 + 1)

        k1 = np.fft.fftfreq(self.n, 1.0 / self.n)
        k2 = np.fft.rfftfreq(self.n, 1.0 / self.n)
        self.k1 = k1[:, None] * np.ones(self.shape)
        self.k2 = k2[None, :] * np.ones(self.shape)
        self.ksq = self.k1**2 + self.k2**2

        # odd derivatives drop the unpaired Nyquist row/column
        nyq = self.n // 2
        self.d1 = TWO_PI * 1j * np.where(np.abs(self.k1) == nyq, 0.0, self.k1)
        self.d2 = TWO_PI * 1j * np.where(np.abs(self.k2) == nyq, 0.0, self.k2)
        self.lap = -4.0 * np.pi**2 * self.ksq

        inv = np.zeros(self.shape)
        np.divide(1.0, 4.0 * np.pi**2 * self.ksq, out=inv, where=self.ksq > 0)
        self.inv_lap = inv  # symbol of G*, zero at k = 0

        cut = self.n / 3.0
        self.band = (np.abs(self.k1) <= cut) & (np.abs(self.k2) <= cut)

        # multiplicity of each stored coefficient in the full lattice
        w = np.full(self.shape, 2.0)
        w[:, 0] = 1.0
        w[:, -1] = 1.0
        self.weights = w

    # -- coordinates ---------------------------------------------------
    def points(self):
        x = np.arange(self.n) / self.n
        return np.meshgrid(x, x, indexing="ij")

    def centered(self):
        x = np.fft.fftfreq(self.n)
        return np.meshgrid(x, x, indexing="ij")

    # -- transforms ----------------------------------------------------
    def forward(self, f):
        return sfft.rfft2(f, norm="forward", workers=self.workers)

    def inverse(self, fhat):
        return sfft.irfft2(fhat, s=(self.n, self.n), norm="forward", workers=self.workers)

    def full_spectrum(self, fhat):
        """Expand rfft-layout coefficients to the full ``(n, n)`` lattice."""
        return sfft.fft2(self.inverse(fhat), norm="forward", workers=self.workers)

    # -- quadratic functionals ----------------------------------------
    def inner(self, fhat, ghat):
        """L2 pairing of two real fields from their coefficients."""
        return np.sum(self.weights * (fhat * np.conj(ghat)).real, axis=(-2, -1))

    def norm2(self, fhat):
        return np.sum(self.weights * np.abs(fhat) ** 2, axis=(-2, -1))

    def grad_norm2(self, fhat):
        return np.sum(self.weights * 4.0 * np.pi**2 * self.ksq * np.abs(fhat) ** 2, axis=(-2, -1))

    # -- operators -----------------------------------------------------
    def gradient(self, fhat, rotated: bool = False):
        """Coefficients of grad f, or of (d2 f, -d1 f) when ``rotated``."""
        g1 = self.d1 * fhat
        g2 = self.d2 * fhat
        if rotated:
            return np.stack([g2, -g1], axis=-3)
        return np.stack([g1, g2], axis=-3)

    def divergence(self, uhat):
        return self.d1 * uhat[..., 0, :, :] + self.d2 * uhat[..., 1, :, :]

    def perp_div(self, uhat):
        """Scalar d2 u1 - d1 u2 (the rotated divergence), inverse of ``biot_savart``."""
        return self.d2 * uhat[..., 0, :, :] - self.d1 * uhat[..., 1, :, :]

    def laplacian(self, fhat):
        return self.lap * fhat

    def green(self, fhat, tol: float = 1e-12):
        """G * f, the zero-mean solution of -Laplace(u) = f."""
        _require_zero_mean(fhat, tol)
        return self.inv_lap * fhat

    def biot_savart(self, omega_hat, tol: float = 1e-12):
        """Divergence-free v with perp_div(v) = omega, i.e. v = grad^perp(psi), psi = -G * omega."""
        return -self.gradient(self.green(omega_hat, tol), rotated=True)

    def dealias(self, fhat):
        return np.where(self.band, fhat, 0.0)


def _require_zero_mean(fhat, tol):
    fhat = np.asarray(fhat)
    mean = np.abs(fhat[..., 0, 0])
    scale = max(1.0, float(np.max(np.abs(fhat)))) if fhat.size else 1.0
    if np.any(mean > tol * scale):
        raise ValueError("field has nonzero mean; Green convolution is only defined on zero-mean fields")


def apply_gradient(grid: FourierGrid, fhat, rotated: bool = False):
    return grid.gradient(fhat, rotated)


def green_convolve(grid: FourierGrid, fhat):
    return grid.green(fhat)


def biot_savart(grid: FourierGrid, omega_hat):
    return grid.biot_savart(omega_hat)


def dealias(grid: FourierGrid, fhat):
    return grid.dealias(fhat)
