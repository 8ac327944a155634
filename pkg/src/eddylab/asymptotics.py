"""Green-function asymptotics behind the calibration and the AKA matrix.

The periodic Green function of -Lap on the unit torus is evaluated in closed
form through the Jacobi theta function (nome q = exp(-pi)):

    G(x) = -(1/2pi) log|theta_1(pi z)| + x2^2/2 + C,   z = x1 + i x2,

with C fixing zero mean.  This route is independent of the FFT machinery and
serves as the reference for the regular part zeta = G - G_plane, where
G_plane(x) = -(1/2pi) log|x|.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .noise import check_resolution, noise_modes
from .profiles import Bump
from .spectral import FourierGrid

NOME = np.exp(-np.pi)
_THETA_TERMS = 12
TARGET_RATIO = 1.0 / (4.0 * np.pi)


# -- theta-function Green function ---------------------------------------


def _theta1(z):
    n = np.arange(_THETA_TERMS)
    coef = 2.0 * (-1.0) ** n * NOME ** ((n + 0.5) ** 2)
    z = np.asarray(z, dtype=complex)
    return np.tensordot(np.sin(np.multiply.outer(z, 2 * n + 1)), coef, axes=([-1], [0]))


def _theta1_logderiv_regular(z):
    """theta_1'/theta_1 (z) - 1/z, valid for |Im z| < pi."""
    z = np.asarray(z, dtype=complex)
    n = np.arange(1, _THETA_TERMS + 1)
    q2n = NOME ** (2 * n)
    series = 4.0 * np.tensordot(np.sin(np.multiply.outer(z, 2 * n)), q2n / (1.0 - q2n), axes=([-1], [0]))
    small = np.abs(z) < 0.1
    zs = np.where(small, z, 0.0)
    zb = np.where(small, 1.0, z)
    # cot z - 1/z, by its Taylor series near 0 to avoid cancellation
    taylor = -zs / 3 - zs**3 / 45 - 2 * zs**5 / 945 - zs**7 / 4725
    direct = np.cos(zb) / np.sin(zb) - 1.0 / zb
    return np.where(small, taylor, direct) + series


@lru_cache(maxsize=None)
def _green_constant() -> float:
    n = np.arange(1, 60)
    return float(np.sum(np.log1p(-np.exp(-2 * np.pi * n))) / (2 * np.pi) - 1.0 / 24.0)


def _wrap(x):
    return x - np.round(x)


def torus_green(x1, x2):
    """Zero-mean periodic Green function (minimal-image reduction first)."""
    x1, x2 = _wrap(np.asarray(x1, float)), _wrap(np.asarray(x2, float))
    th = _theta1(np.pi * (x1 + 1j * x2))
    return -np.log(np.abs(th)) / (2 * np.pi) + 0.5 * x2**2 + _green_constant()


def torus_green_gradient(x1, x2):
    """(d1 G, d2 G) at x, minimal image; singular at lattice points."""
    x1, x2 = _wrap(np.asarray(x1, float)), _wrap(np.asarray(x2, float))
    g1, g2 = zeta_gradient(x1, x2)
    r2 = x1**2 + x2**2
    return g1 - x1 / (2 * np.pi * r2), g2 - x2 / (2 * np.pi * r2)


def zeta(x1, x2):
    """zeta(w) = G(w) + (1/2pi) log|w| for unwrapped w with |w2| < 1."""
    x1, x2 = np.asarray(x1, float), np.asarray(x2, float)
    z = np.pi * (x1 + 1j * x2)
    th = _theta1(z)
    r = np.hypot(x1, x2)
    # log|theta_1(pi w)| - log|w| = log|pi * theta_1(z) / z|
    zz = np.where(r > 0, z, 1.0)
    ratio = np.where(r > 0, np.pi * th / zz, np.pi * 2 * sum((-1) ** k * NOME ** ((k + 0.5) ** 2) * (2 * k + 1) for k in range(_THETA_TERMS)))
    return -np.log(np.abs(ratio)) / (2 * np.pi) + 0.5 * x2**2 + _green_constant()


def zeta_gradient(x1, x2):
    """Gradient of zeta at unwrapped w (smooth near 0)."""
    x1, x2 = np.asarray(x1, float), np.asarray(x2, float)
    h = np.pi * _theta1_logderiv_regular(np.pi * (x1 + 1j * x2))
    return -h.real / (2 * np.pi), h.imag / (2 * np.pi) + x2


def plane_green_gradient(x1, x2):
    r2 = x1**2 + x2**2
    return -x1 / (2 * np.pi * r2), -x2 / (2 * np.pi * r2)


# -- quadrature helpers ----------------------------------------------------


@lru_cache(maxsize=None)
def _gl(m: int):
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (x + 1), 0.5 * w


def _square_polar_rule(half: float, m_ang: int = 48, m_rad: int = 64, r_split=(), log_from=None):
    """Nodes (x1, x2, weight) for the square [-half, half]^2 in polar form.

    Angles are split into octants so r_max(phi) = half / max(|cos|, |sin|) is
    smooth on each piece.  Radial panels break at ``r_split``; beyond
    ``log_from`` the radial variable is log r (for 1/r-type integrands).
    """
    ta, wa = _gl(m_ang)
    tr, wr = _gl(m_rad)
    xs, ys, ws = [], [], []
    for o in range(8):
        phi = (o + ta) * np.pi / 4
        wphi = wa * np.pi / 4
        rmax = half / np.maximum(np.abs(np.cos(phi)), np.abs(np.sin(phi)))
        for p, (ph, wp, rm) in enumerate(zip(phi, wphi, rmax)):
            edges = [0.0] + [s for s in r_split if s < rm] + [rm]
            for a, b in zip(edges, edges[1:]):
                if log_from is not None and a >= log_from:
                    la, lb = np.log(a), np.log(b)
                    r = np.exp(la + (lb - la) * tr)
                    w = (lb - la) * wr * r * r
                else:
                    r = a + (b - a) * tr
                    w = (b - a) * wr * r
                xs.append(r * np.cos(ph))
                ys.append(r * np.sin(ph))
                ws.append(w * wp)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ws)


def kernel_l1_norm(m_ang: int = 48, m_rad: int = 48) -> float:
    """L1 norm over the torus of the Biot-Savart kernel K = grad^perp G."""
    x1, x2, w = _square_polar_rule(0.5, m_ang, m_rad, r_split=(0.25,))
    g1, g2 = torus_green_gradient(x1, x2)
    return float(np.sum(w * np.hypot(g1, g2)))


# -- pair integrals ----------------------------------------------------------


@dataclass(frozen=True)
class PairIntegralResult:
    i: int
    j: int
    ell: float
    value: float
    ratio: float  # value / log(1/ell); nan at ell = 1
    n: int


def pair_integral(phi: Bump, psi: Bump, ell: float, i: int, j: int, n: int | None = None, modes: str = "all"):
    """<d_i G * phi_ell, d_j G * psi_ell> on the unit torus, summed in Fourier space.

    ``phi`` and ``psi`` are unit-scale profiles.  ``modes="noise"`` restricts
    the sum to the modes that carry noise on the same grid, which is what the
    covariance constants see.  Default n is the smallest power of two with
    n * ell >= 16.
    """
    if i not in (0, 1) or j not in (0, 1):
        raise ValueError("derivative indices must be 0 or 1")
    if n is None:
        n = max(64, 1 << int(np.ceil(np.log2(16.0 / ell))))
    grid = FourierGrid(n)
    check_resolution(grid, ell)
    return _pair_values(phi, psi, ell, grid, modes)[i][j]


def pair_matrix(phi: Bump, psi: Bump, ell: float, grid: FourierGrid, modes: str = "all"):
    """All four pair integrals on one grid, as a 2x2 array of values."""
    check_resolution(grid, ell)
    res = _pair_values(phi, psi, ell, grid, modes)
    return np.array([[res[a][b].value for b in range(2)] for a in range(2)])


def _pair_values(phi, psi, ell, grid, modes):
    if modes == "all":
        mask = grid.ksq > 0
    elif modes == "noise":
        mask = noise_modes(grid)
    else:
        raise ValueError(f"unknown mode set {modes!r}")
    kabs = np.sqrt(grid.ksq)
    ph = phi.rescale(ell).fourier(kabs)
    ps = ph if psi == phi else psi.rescale(ell).fourier(kabs)
    dk = (grid.d1.imag, grid.d2.imag)  # 2 pi k with Nyquist dropped
    base = np.where(mask, grid.weights * ph * ps * grid.inv_lap**2, 0.0)
    log_inv = np.log(1.0 / ell)
    out = [[None, None], [None, None]]
    for a in range(2):
        for b in range(2):
            v = float(np.sum(base * dk[a] * dk[b]))
            ratio = v / log_inv if log_inv > 0 else float("nan")
            out[a][b] = PairIntegralResult(a, b, ell, v, ratio, grid.n)
    return out


def limit_matrix_from_pairs(theta: Bump, chi: Bump, ell: float, grid: FourierGrid, gamma_h: float, gamma_3: float):
    """grad Q_{H,3}(0)[m, i] = d_i Q_{m3}(0) assembled from pair integrals.

    With sigma_H = Gamma grad^perp G*theta and sigma_3 = gamma G*chi,
    d_i Q_{13}(0) = -Gamma gamma J_{i2} and d_i Q_{23}(0) = Gamma gamma J_{i1},
    J_{ab} = <d_a G*theta_ell, d_b G*chi_ell> over the noise modes.
    """
    j = pair_matrix(theta, chi, ell, grid, modes="noise")
    gg = gamma_h * gamma_3
    return np.array([[-gg * j[0, 1], -gg * j[1, 1]], [gg * j[0, 0], gg * j[1, 0]]])


# -- planar decomposition -------------------------------------------------


def _radial_mass(b: Bump, s):
    """Mass of the rescaled bump inside radius s."""
    s = np.asarray(s, float)
    t, w = _gl(128)
    rad = b.support
    out = np.ones_like(s)
    inside = s < rad
    si = s[inside]
    # int_0^s 2 pi rho theta(rho) d rho, mapped to [0, 1]
    rho = si[:, None] * t[None, :]
    out[inside] = (2 * np.pi * rho * b.radial(rho) * si[:, None]) @ w
    return out


def plane_convolved_gradient(b: Bump, x1, x2):
    """grad G_plane * b at x for a radial density b (Newton's theorem)."""
    r = np.hypot(x1, x2)
    m = _radial_mass(b, r)
    g1, g2 = plane_green_gradient(x1, x2)
    return g1 * m, g2 * m


def decomposition_terms(phi: Bump, psi: Bump, ell: float, i: int, j: int, m_ang: int = 48, m_rad: int = 64):
    """Four-term split of the torus pair integral on the fundamental square.

    On the square, d_i G * phi_ell = a_i + b_i with a_i = d_i G_plane * phi_ell
    (closed form by Newton's theorem) and b_i = d_i zeta * phi_ell = d_i zeta,
    since d_i zeta is harmonic and phi_ell is radial with unit mass.  Returns
    (main, cross_a_b, cross_b_a, zeta_zeta); their sum is the pair integral.
    """
    p, q = phi.rescale(ell), psi.rescale(ell)
    cuts = sorted({p.support, q.support})
    x1, x2, w = _square_polar_rule(0.5, m_ang, m_rad, r_split=tuple(cuts), log_from=max(cuts))
    ap = plane_convolved_gradient(p, x1, x2)
    aq = ap if q == p else plane_convolved_gradient(q, x1, x2)
    z = zeta_gradient(x1, x2)
    main = float(np.sum(w * ap[i] * aq[j]))
    ab = float(np.sum(w * ap[i] * z[j]))
    ba = float(np.sum(w * z[i] * aq[j]))
    bb = float(np.sum(w * z[i] * z[j]))
    return main, ab, ba, bb


# -- far field and annulus ------------------------------------------------


def farfield_error(psi: Bump, radii, center=(0.0, 0.0), n_points: int = 64, m_quad: int = 48):
    """Deviation of grad G_plane * psi from grad G_plane on circles |x| = R.

    ``psi`` is centred at ``center``; the planar convolution is computed by
    polar Gauss-Legendre quadrature over its support.  Rows carry the radius,
    max |error| |x|^2 on that circle, and the running sup over all circles of
    radius >= R, which is non-increasing by construction.
    """
    c1, c2 = map(float, center)
    rad = psi.support
    reach = rad + np.hypot(c1, c2)
    radii = np.asarray(radii, float)
    if np.any(radii < max(2 * reach, 1.0)):
        raise ValueError("radii must be >= max(2 * support reach, 1)")
    tr, wr = _gl(m_quad)
    ta, wa = _gl(2 * m_quad)
    rr = rad * tr
    aa = 2 * np.pi * ta
    y1 = c1 + np.outer(rr, np.cos(aa)).ravel()
    y2 = c2 + np.outer(rr, np.sin(aa)).ravel()
    wy = (np.outer(rad * wr * rr, 2 * np.pi * wa) * psi.radial(rr)[:, None]).ravel()
    ang = 2 * np.pi * np.arange(n_points) / n_points
    rows = []
    for big_r in radii:
        x1 = big_r * np.cos(ang)
        x2 = big_r * np.sin(ang)
        g1, g2 = plane_green_gradient(x1[:, None] - y1[None], x2[:, None] - y2[None])
        conv1, conv2 = g1 @ wy, g2 @ wy
        e1, e2 = plane_green_gradient(x1, x2)
        err = np.hypot(conv1 - e1, conv2 - e2)
        rows.append(dict(radius=float(big_r), scaled_error=float(np.max(err) * big_r**2)))
    env = -np.inf
    for row in reversed(rows):
        env = max(env, row["scaled_error"])
        row["envelope"] = env
    return rows


def farfield_constant(support: float) -> float:
    """The constant 2 (R^2 + 3 R) / pi bounding |error| |x|^2."""
    return 2 * (support**2 + 3 * support) / np.pi


def annulus_integral(big_r: float, ell: float, i: int = 0) -> float:
    """int over [-1/(2 ell), 1/(2 ell)]^2 minus B_R of (d_i G_plane)^2, divided by log(1/ell).

    Adaptive quadrature in r of x_i^2 / (4 pi^2 |x|^4) * r, nested inside
    adaptive quadrature in the angle over the eight octants.
    """
    half = 0.5 / ell
    if not 0 < big_r < half:
        raise ValueError("need 0 < R < 1 / (2 ell)")
    if i not in (0, 1):
        raise ValueError("component must be 0 or 1")
    trig = np.cos if i == 0 else np.sin

    def radial(phi):
        rmax = half / max(abs(np.cos(phi)), abs(np.sin(phi)))
        c = trig(phi) ** 2 / (4 * np.pi**2)
        val, _ = integrate.quad(lambda r: c / r, big_r, rmax, epsabs=1e-14, epsrel=1e-13, limit=200)
        return val

    total = 0.0
    for o in range(8):
        v, _ = integrate.quad(radial, o * np.pi / 4, (o + 1) * np.pi / 4, epsabs=1e-13, epsrel=1e-13, limit=200)
        total += v
    return total / np.log(1.0 / ell)


def annulus_bounds(big_r: float, ell: float):
    """Bracket (1/4pi) log(1/(2 R ell)) <= integral <= (1/4pi) log(1/(R ell)), normalized."""
    li = np.log(1.0 / ell)
    return TARGET_RATIO * np.log(1.0 / (2 * big_r * ell)) / li, TARGET_RATIO * np.log(1.0 / (big_r * ell)) / li
