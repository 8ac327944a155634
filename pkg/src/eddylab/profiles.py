"""Radially symmetric vortex profiles and their Fourier transforms."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import integrate, special

_HANKEL_NODES = 256


def _unit_bump(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = t < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def _bump_mass() -> float:
    # integral over the unit disk of exp(-1/(1-|x|^2))
    val, _ = integrate.quad(lambda t: 2.0 * np.pi * t * float(_unit_bump(t)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
    return val


@lru_cache(maxsize=None)
def _gauss_legendre(m: int):
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class Bump:
    """theta(x) = c exp(-1/(1 - |x|^2/r^2)) on |x| < r, rescaled by ell.

    The rescaled density is ``ell**-2 * theta(x / ell)``; ``fourier`` returns
    ``theta_hat(ell * |k|)`` computed by a Hankel transform.
    """

    radius: float
    ell: float = 1.0
    const: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.radius < 0.5:
            raise ValueError(f"support radius must lie in (0, 1/2), got {self.radius}")
        if not 0.0 < self.ell <= 1.0:
            raise ValueError(f"scale must lie in (0, 1], got {self.ell}")
        object.__setattr__(self, "const", 1.0 / (self.radius**2 * _bump_mass()))

    @property
    def support(self) -> float:
        return self.radius * self.ell

    def radial(self, s):
        """Density as a function of |x| (already rescaled)."""
        s = np.asarray(s, dtype=float)
        r = self.radius
        return self.const * _unit_bump(s / (self.ell * r)) / self.ell**2

    def __call__(self, x1, x2):
        return self.radial(np.hypot(x1, x2))

    def fourier(self, kabs):
        """Transform at wavenumber magnitude |k|: 2 pi int theta_ell(s) J0(2 pi |k| s) s ds."""
        kabs = np.asarray(kabs, dtype=float)
        uniq, inv = np.unique(kabs.ravel(), return_inverse=True)
        t, w = _gauss_legendre(_HANKEL_NODES)
        weights = w * t * _unit_bump(t)
        scale = 2.0 * np.pi * self.const * self.radius**2
        arg = 2.0 * np.pi * self.ell * self.radius
        out = np.empty(uniq.size)
        chunk = max(1, 2_000_000 // t.size)
        for lo in range(0, uniq.size, chunk):
            rho = uniq[lo:lo + chunk]
            out[lo:lo + chunk] = scale * (special.j0(arg * rho[:, None] * t[None, :]) @ weights)
        return out[inv].reshape(kabs.shape)

    def rescale(self, ell: float) -> "Bump":
        return replace(self, ell=self.ell * ell)


@dataclass(frozen=True)
class VortexProfile:
    """Horizontal profile theta and vertical profile chi of one vortex."""

    theta: Bump
    chi: Bump

    @property
    def ell(self) -> float:
        return self.theta.ell


def build_profile(kind: str = "bump", r: float = 0.35, r_chi: float | None = None) -> VortexProfile:
    if kind != "bump":
        raise ValueError(f"unknown profile family {kind!r}")
    return VortexProfile(Bump(r), Bump(r if r_chi is None else r_chi))


def scale_profile(p: VortexProfile, ell: float) -> VortexProfile:
    if not 0.0 < ell <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {ell}")
    return VortexProfile(p.theta.rescale(ell), p.chi.rescale(ell))
