"""Ito-form stochastic 2D-3C system with transport-stretching vortex noise.

    d omega3 = [-v_H.grad omega3 + (nu Lap + L) omega3 + div(M omega_H)] dt
               - (dW_H.grad omega3 - omega_H.grad dW_3)
    d v3     = [-v_H.grad v3 + (nu Lap + L) v3] dt - dW_H.grad v3

with L f = 1/2 div(Q_H(0) grad f), M = grad Q_{H,3}(0), omega_H = grad^perp v3
and v_H the Biot-Savart velocity of omega3.  The default scheme ``"ifem"`` is an
integrating-factor Euler-Maruyama step; the stiff operator nu Lap + L is applied
exactly per mode.  Scheme ``"ifem-exp"`` keeps that step for omega3 but moves v3
with the exact exponential of the band-projected transport operator over the
step, which conserves the v3 energy pathwise and generates the second-order
corrector implicitly.  States carry an optional leading batch axis so
ensembles advance together.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, special

from .noise import CovarianceTables, SpectralNoise, hermitian_gaussian
from .spectral import FourierGrid

TWO_PI = 2.0 * np.pi
SCHEMES = ("ifem", "ifem-exp")


class BlowUpError(RuntimeError):
    pass


@dataclass
class State:
    omega3: np.ndarray  # coefficients, shape (..., n, n//2+1)
    v3: np.ndarray
    t: float = 0.0

    def copy(self) -> "State":
        return State(self.omega3.copy(), self.v3.copy(), self.t)


@dataclass(frozen=True)
class SolverConfig:
    """Time stepping parameters; ``scheme`` is ``"ifem"`` or ``"ifem-exp"``."""

    nu: float = 0.05
    dt: float = 1e-3
    t_end: float = 0.5
    n: int = 64
    seed: int = 0
    scheme: str = "ifem"
    record_every: int = 1
    blowup_factor: float = 1e6
    check_stability: bool = True

    def __post_init__(self):
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


def default_initial_state(grid: FourierGrid, batch: tuple = ()) -> State:
    x1, x2 = grid.points()
    om = grid.forward(np.sin(TWO_PI * x1) * np.cos(TWO_PI * x2))
    v = grid.forward(np.cos(TWO_PI * x2))
    om = np.broadcast_to(om, batch + grid.shape).copy()
    v = np.broadcast_to(v, batch + grid.shape).copy()
    return State(om, v, 0.0)


def operator_symbol(grid: FourierGrid, nu: float, qbar) -> np.ndarray:
    """Symbol of nu Lap + 1/2 div(Qbar grad): -(4 pi^2 nu |k|^2 + 2 pi^2 k.Qbar k)."""
    q = np.asarray(qbar, dtype=float)
    kq = q[0, 0] * grid.k1**2 + (q[0, 1] + q[1, 0]) * grid.k1 * grid.k2 + q[1, 1] * grid.k2**2
    return -(4.0 * np.pi**2 * nu * grid.ksq + 2.0 * np.pi**2 * kq)


def aka_symbol(grid: FourierGrid, m) -> np.ndarray:
    """Symbol of v3 -> div(M grad^perp v3): -4 pi^2 k.M k^perp with k^perp = (k2, -k1)."""
    m = np.asarray(m, dtype=float)
    k1 = np.where(np.abs(grid.k1) == grid.n // 2, 0.0, grid.k1)
    k2 = np.where(np.abs(grid.k2) == grid.n // 2, 0.0, grid.k2)
    p1, p2 = k2, -k1
    form = k1 * (m[0, 0] * p1 + m[0, 1] * p2) + k2 * (m[1, 0] * p1 + m[1, 1] * p2)
    return -4.0 * np.pi**2 * form


def sup_velocity(grid: FourierGrid, omega_hat) -> float:
    u = grid.inverse(grid.biot_savart(omega_hat))
    return float(np.max(np.hypot(u[..., 0, :, :], u[..., 1, :, :])))


def stability_limit(grid: FourierGrid, vmax: float) -> float:
    """Advective bound 0.2 / (|v_H|_inf * 2 pi n / 3)."""
    if vmax <= 0:
        return np.inf
    return 0.2 / (vmax * TWO_PI * grid.n / 3.0)


def noise_stability_limit(grid: FourierGrid, opnorm_qh: float) -> float:
    """Quadratic-variation bound 0.2 / (2 pi^2 opnorm_QH (n/3)^2); reported, not enforced."""
    if opnorm_qh <= 0:
        return np.inf
    return 0.2 / (2.0 * np.pi**2 * opnorm_qh * (grid.n / 3.0) ** 2)


def _transport(grid, a1, a2, fhat):
    """Coefficients of a.grad f for real-space a and coefficient field f, dealiased."""
    buf = np.empty(fhat.shape[:-2] + (2,) + fhat.shape[-2:], dtype=complex)
    np.multiply(grid.d1, fhat, out=buf[..., 0, :, :])
    np.multiply(grid.d2, fhat, out=buf[..., 1, :, :])
    f = grid.inverse(buf)
    prod = a1 * f[..., 0, :, :]
    prod += a2 * f[..., 1, :, :]
    return grid.forward(prod) * grid.band


def transport_bound(grid: FourierGrid, a1, a2):
    """Upper bound on the norm of f -> P(a.grad f) on the band, per batch entry.

    The product is alias free, so grid Parseval gives |P(a.grad f)| <= max|a| |grad f|.
    """
    kmax = TWO_PI * np.sqrt(2.0) * np.floor(grid.n / 3.0)
    amax = np.sqrt(np.max(a1**2 + a2**2, axis=(-2, -1)))
    return amax * kmax


def exp_transport(grid: FourierGrid, a1, a2, fhat, method: str = "krylov", tol: float = 1e-10):
    """exp(B) f for the band-projected transport B = -P(a.grad).

    For divergence-free a, B is skew on the band, so exp(B) is an isometry and
    conserves the L2 norm of f.  ``method="krylov"`` builds a Lanczos basis
    and stops when the standard a-posteriori estimate falls below ``tol``
    relative to |f|; ``method="chebyshev"`` sums the Chebyshev-Bessel series
    up to the a-priori bound of ``transport_bound``.  Returns the coefficients
    and the number of operator applications.
    """
    if method not in ("krylov", "chebyshev"):
        raise ValueError(f"unknown method {method!r}")
    shape = fhat.shape
    f = fhat.reshape((-1,) + shape[-2:])
    real = shape[:-2] + a1.shape[-2:]
    b1 = np.broadcast_to(a1, real).reshape((-1,) + real[-2:])
    b2 = np.broadcast_to(a2, real).reshape((-1,) + real[-2:])
    run = _krylov_exp if method == "krylov" else _chebyshev_exp
    out, count = run(grid, b1, b2, f, tol)
    return out.reshape(shape), count


def _chebyshev_exp(grid, a1, a2, f, tol):
    # exp(rho Y) = J_0(rho) + 2 sum_m J_m(rho) C_m,  C_{m+1} = 2 Y C_m + C_{m-1}
    rho = np.maximum(transport_bound(grid, a1, a2), 1e-300)
    m_max = int(np.max(rho)) + 2
    while np.max(np.abs(special.jv(m_max, rho))) > tol * 1e-3:
        m_max += 1
    col = (slice(None), None, None)
    b1 = a1 / rho[col]
    b2 = a2 / rho[col]
    c_prev = f
    c_cur = -_transport(grid, b1, b2, f)
    out = special.j0(rho)[col] * c_prev + 2.0 * special.j1(rho)[col] * c_cur
    for m in range(2, m_max + 1):
        c_prev, c_cur = c_cur, c_prev - 2.0 * _transport(grid, b1, b2, c_cur)
        out = out + 2.0 * special.jv(m, rho)[col] * c_cur
    return out, m_max


def _krylov_exp(grid, a1, a2, f, tol, m_cap=400, check_every=2):
    # B V_j = beta_j V_{j+1} - beta_{j-1} V_{j-1}; skew tridiagonal T_m.
    # V_m exp(T_m) e_1 is an isometric image of f for every m, so truncation
    # only costs accuracy, never energy.
    nb = f.shape[0]
    col = (slice(None), None, None)
    nrm = np.sqrt(grid.norm2(f))
    basis = [f * _safe_inverse(nrm)[col]]
    beta = []
    coef = np.ones((nb, 1))
    for j in range(m_cap):
        x = _transport(grid, a1, a2, basis[j])
        x *= -1.0
        if j > 0:
            x += beta[j - 1][col] * basis[j - 1]
        b = np.sqrt(grid.norm2(x))
        inv = _safe_inverse(b)
        beta.append(np.where(inv > 0, b, 0.0))
        x *= inv[col]
        basis.append(x)
        m = j + 1
        if m % check_every == 0 or not np.any(inv):
            coef = _tridiag_exp(beta[: m - 1], nb, m)
            err = beta[m - 1] * np.abs(coef[:, m - 1])
            if np.all(err <= tol):
                break
    out = coef[:, 0][col] * basis[0]
    for j in range(1, coef.shape[1]):
        out += coef[:, j][col] * basis[j]
    return out * nrm[col], len(beta)


def _safe_inverse(x, floor=1e-14):
    return np.divide(1.0, x, out=np.zeros_like(x), where=x > floor)


def _tridiag_exp(beta, nb, m):
    """First column of exp(T) for the skew tridiagonal T with sub-diagonal beta."""
    t = np.zeros((nb, m, m))
    for j, b in enumerate(beta):
        t[:, j + 1, j] = b
        t[:, j, j + 1] = -b
    return linalg.expm(t)[:, :, 0]


def ito_drift(s: State, sn: SpectralNoise | None, ct: CovarianceTables | None, nu: float):
    """Non-martingale right-hand sides (d_omega3, d_v3) as coefficient arrays."""
    grid = _grid_of(s, sn)
    qh0 = np.zeros((2, 2)) if ct is None else ct.QH0
    m = np.zeros((2, 2)) if ct is None else ct.grad_QH3_0
    lin = operator_symbol(grid, nu, qh0)
    u = grid.inverse(grid.biot_savart(s.omega3))
    u1, u2 = u[..., 0, :, :], u[..., 1, :, :]
    d_om = -_transport(grid, u1, u2, s.omega3) + lin * s.omega3 + aka_symbol(grid, m) * s.v3
    d_v = -_transport(grid, u1, u2, s.v3) + lin * s.v3
    return _pin(d_om), _pin(d_v)


def noise_term(s: State, dw_h_hat, dw3_hat, grid: FourierGrid):
    """(-(dW_H.grad omega3 - omega_H.grad dW_3), -dW_H.grad v3), dealiased coefficients."""
    dw = grid.inverse(dw_h_hat)
    a1, a2 = dw[..., 0, :, :], dw[..., 1, :, :]
    wh = grid.inverse(grid.gradient(s.v3, rotated=True))
    g3 = grid.inverse(grid.gradient(dw3_hat))
    stretch = grid.dealias(grid.forward(wh[..., 0, :, :] * g3[..., 0, :, :] + wh[..., 1, :, :] * g3[..., 1, :, :]))
    n_om = -_transport(grid, a1, a2, s.omega3) + stretch
    n_v = -_transport(grid, a1, a2, s.v3)
    return _pin(n_om), _pin(n_v)


def _pin(fhat):
    fhat = np.asarray(fhat)
    fhat[..., 0, 0] = 0.0
    return fhat


def _grid_of(s, sn):
    if sn is not None:
        return sn.grid
    n = s.omega3.shape[-2]
    return FourierGrid(n)


@dataclass
class TrajectoryStats:
    """Recorded diagnostics; every array has the batch shape in front and time last."""

    t: np.ndarray
    v_energy: np.ndarray
    omega_energy: np.ndarray
    v_grad: np.ndarray
    omega_grad: np.ndarray
    omega_fourth: np.ndarray
    v_dissipation: np.ndarray  # 2 nu int_0^t |grad v3|^2, right-endpoint rule
    obs_omega: np.ndarray  # (..., n_obs, n_rec)
    obs_v: np.ndarray
    qv: np.ndarray | None = None  # (..., 3, n_obs, n_rec) accumulated quadratic variations
    aborted: np.ndarray | None = None
    fourth_moment_ok: bool = True
    field_t: np.ndarray | None = None
    omega_fields: np.ndarray | None = None  # (..., n_field, n, n//2+1)
    v_fields: np.ndarray | None = None


@dataclass
class Stepper:
    """Precomputed multipliers for repeated steps on one grid and noise."""

    grid: FourierGrid
    cfg: SolverConfig
    sn: SpectralNoise | None
    ct: CovarianceTables | None
    dt: float = field(init=False)

    def __post_init__(self):
        g = self.grid
        self.dt = self.cfg.dt
        qh0 = np.zeros((2, 2)) if self.ct is None else self.ct.QH0
        m = np.zeros((2, 2)) if self.ct is None else self.ct.grad_QH3_0
        self.decay_nu = np.exp(operator_symbol(g, self.cfg.nu, np.zeros((2, 2))) * self.dt)
        self.decay_q = np.exp(operator_symbol(g, 0.0, qh0) * self.dt)
        self.aka = aka_symbol(g, m) * self.dt
        self.has_aka = bool(np.any(m != 0))

    def advance(self, s: State, g_noise) -> State:
        """One step with standard complex Gaussians ``g_noise`` (None = no noise)."""
        grid, dt = self.grid, self.dt
        om, v = s.omega3, s.v3
        u = grid.inverse(grid.biot_savart(om))
        a1 = u[..., 0, :, :] * dt
        a2 = u[..., 1, :, :] * dt
        stretch = 0.0
        if g_noise is not None and self.sn is not None:
            dw = g_noise[..., None, :, :] * (self.sn.sigma_hat * np.sqrt(dt))
            w = grid.inverse(dw[..., :2, :, :])
            a1 = a1 + w[..., 0, :, :]
            a2 = a2 + w[..., 1, :, :]
            if self.sn.gamma3 != 0.0:
                wh = grid.inverse(grid.gradient(v, rotated=True))
                g3 = grid.inverse(grid.gradient(dw[..., 2, :, :]))
                stretch = grid.dealias(
                    grid.forward(wh[..., 0, :, :] * g3[..., 0, :, :] + wh[..., 1, :, :] * g3[..., 1, :, :])
                )
        om_new = om - _transport(grid, a1, a2, om) + stretch
        if self.has_aka:
            om_new = om_new + self.aka * v
        if self.cfg.scheme == "ifem-exp":
            v_new, _ = exp_transport(grid, a1, a2, v)
        else:
            v_new = self.decay_q * (v - _transport(grid, a1, a2, v))
        om_new = self.decay_nu * self.decay_q * om_new
        v_new = self.decay_nu * v_new
        return State(_pin(om_new), _pin(v_new), s.t + dt)


def step(s: State, cfg: SolverConfig, sn: SpectralNoise | None, ct: CovarianceTables | None, rng) -> State:
    grid = _grid_of(s, sn)
    batch = s.omega3.shape[:-2]
    g = hermitian_gaussian(rng, grid, batch) if sn is not None else None
    out = Stepper(grid, cfg, sn, ct).advance(s, g)
    _check_finite(out, s, cfg)
    return out


def _check_finite(new: State, old: State, cfg: SolverConfig):
    if not (np.all(np.isfinite(new.omega3)) and np.all(np.isfinite(new.v3))):
        raise BlowUpError(f"non-finite state at t = {new.t:.6g}")


def _draw(rngs, grid):
    """One Gaussian field per trajectory, each from its own stream."""
    return np.stack([hermitian_gaussian(r, grid) for r in rngs])


def run_trajectory(
    init: State,
    cfg: SolverConfig,
    sn: SpectralNoise | None,
    ct: CovarianceTables | None,
    rngs=None,
    observables=None,
    qv_observables=None,
    fourth_moment_cap: float | None = None,
    field_every: int | None = None,
):
    """Integrate a batch of trajectories to ``cfg.t_end``.

    ``init`` fields have shape (B, n, m); ``rngs`` holds B independent
    generators.  Trajectories whose state becomes non-finite or exceeds
    ``blowup_factor`` times the initial size are frozen and flagged in
    ``stats.aborted`` instead of stopping the batch.

    ``qv_observables`` (coefficient arrays of test functions phi) switches on
    accumulation of the per-step quadratic variations of the three martingales
    <v3, dW_H.grad phi>, <omega3, dW_H.grad phi> and <dW_3, omega_H.grad phi>.
    ``field_every`` (in steps) stores the coefficient fields at those steps.
    """
    grid = _grid_of(init, sn)
    if init.omega3.ndim != 3:
        raise ValueError("initial state must carry a batch axis (B, n, n//2+1)")
    nb = init.omega3.shape[0]
    if sn is not None:
        if rngs is None:
            rngs = [np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0, b))) for b in range(nb)]
        if len(rngs) != nb:
            raise ValueError("one generator per trajectory is required")
    if cfg.check_stability:
        vmax = sup_velocity(grid, init.omega3)
        lim = stability_limit(grid, vmax)
        if cfg.dt > lim:
            raise ValueError(f"dt = {cfg.dt:g} exceeds the advective stability bound {lim:.3g}")

    obs = np.zeros((0,) + grid.shape) if observables is None else np.asarray(observables)
    stepper = Stepper(grid, cfg, sn, ct)
    nsteps = cfg.n_steps
    every = max(1, cfg.record_every)
    nrec = nsteps // every + 1

    def rec_arr(*extra):
        return np.zeros((nb,) + extra + (nrec,))

    st = TrajectoryStats(
        t=np.arange(nrec) * every * cfg.dt,
        v_energy=rec_arr(),
        omega_energy=rec_arr(),
        v_grad=rec_arr(),
        omega_grad=rec_arr(),
        omega_fourth=rec_arr(),
        v_dissipation=rec_arr(),
        obs_omega=rec_arr(len(obs)),
        obs_v=rec_arr(len(obs)),
    )
    qv_phi = None
    if qv_observables is not None and sn is not None:
        qv_phi = np.asarray(qv_observables)
        st.qv = rec_arr(3, len(qv_phi))
        grad_phi = grid.inverse(grid.gradient(qv_phi))  # (n_obs, 2, n, n)
        qv_acc = np.zeros((nb, 3, len(qv_phi)))

    if field_every:
        nf = nsteps // field_every + 1
        st.field_t = np.arange(nf) * field_every * cfg.dt
        st.omega_fields = np.zeros((nb, nf) + grid.shape, dtype=complex)
        st.v_fields = np.zeros((nb, nf) + grid.shape, dtype=complex)

    s = init.copy()
    alive = np.ones(nb, dtype=bool)
    e0 = grid.norm2(s.omega3) + grid.norm2(s.v3)
    diss = np.zeros(nb)

    def record(j, s):
        ev = grid.norm2(s.v3)
        eo = grid.norm2(s.omega3)
        st.v_energy[:, j] = ev
        st.omega_energy[:, j] = eo
        st.v_grad[:, j] = grid.grad_norm2(s.v3)
        st.omega_grad[:, j] = grid.grad_norm2(s.omega3)
        st.omega_fourth[:, j] = eo**2
        st.v_dissipation[:, j] = diss
        if len(obs):
            st.obs_omega[:, :, j] = grid.inner(s.omega3[:, None], obs[None])
            st.obs_v[:, :, j] = grid.inner(s.v3[:, None], obs[None])
        if qv_phi is not None:
            st.qv[:, :, :, j] = qv_acc

    def record_fields(j, s):
        st.omega_fields[:, j] = s.omega3
        st.v_fields[:, j] = s.v3

    record(0, s)
    if field_every:
        record_fields(0, s)
    for it in range(1, nsteps + 1):
        g = _draw(rngs, grid) if sn is not None else None
        if qv_phi is not None:
            qv_acc += _quadratic_variations(grid, sn, s, grad_phi) * cfg.dt
        new = stepper.advance(s, g)
        bad = ~(np.all(np.isfinite(new.omega3), axis=(-2, -1)) & np.all(np.isfinite(new.v3), axis=(-2, -1)))
        size = np.where(bad, np.inf, grid.norm2(np.nan_to_num(new.omega3)) + grid.norm2(np.nan_to_num(new.v3)))
        bad |= size > cfg.blowup_factor * e0
        newly = bad & alive
        if np.any(newly):
            alive &= ~bad
        keep = alive[:, None, None]
        s = State(np.where(keep, new.omega3, s.omega3), np.where(keep, new.v3, s.v3), new.t)
        diss = diss + np.where(alive, 2.0 * cfg.nu * cfg.dt * grid.grad_norm2(s.v3), 0.0)
        if it % every == 0:
            record(it // every, s)
        if field_every and it % field_every == 0:
            record_fields(it // field_every, s)

    st.aborted = ~alive
    if fourth_moment_cap is not None:
        cap = fourth_moment_cap * (grid.norm2(init.omega3) ** 2 + grid.norm2(init.v3) ** 2)
        mean4 = st.omega_fourth[alive].mean(axis=0) if np.any(alive) else np.full(nrec, np.inf)
        st.fourth_moment_ok = bool(np.all(mean4 <= cap.max()))
    return s, st


def _quadratic_variations(grid, sn, s: State, grad_phi):
    """Per-unit-time quadratic variations of the three martingale families.

    For a vector field f, sum_k <f, sigma_k>^2 = sum_k |sigma_hat(k)^* f_hat(k)|^2.
    """
    v = grid.inverse(s.v3)  # (B, n, n)
    om = grid.inverse(s.omega3)
    wh = grid.inverse(grid.gradient(s.v3, rotated=True))  # (B, 2, n, n)
    sh = sn.sigma_hat[:2]
    s3 = sn.sigma_hat[2]
    w = grid.weights
    out = np.empty((v.shape[0], 3, grad_phi.shape[0]))
    for j, gp in enumerate(grad_phi):
        fv = grid.forward(v[:, None] * gp[None])  # (B, 2, n, m)
        fo = grid.forward(om[:, None] * gp[None])
        fs = grid.forward(wh[:, 0] * gp[0] + wh[:, 1] * gp[1])
        out[:, 0, j] = np.sum(w * np.abs(np.sum(np.conj(sh) * fv, axis=1)) ** 2, axis=(-2, -1))
        out[:, 1, j] = np.sum(w * np.abs(np.sum(np.conj(sh) * fo, axis=1)) ** 2, axis=(-2, -1))
        out[:, 2, j] = np.sum(w * np.abs(np.conj(s3) * fs) ** 2, axis=(-2, -1))
    return out
