"""Deterministic limit 2D-3C system with eddy viscosity and the AKA term.

    d_t omega3 = -v_H.grad omega3 + (nu Lap + L_Q) omega3 + div(A omega_H)
    d_t v3     = -v_H.grad v3     + (nu Lap + L_Q) v3

with L_Q f = 1/2 div(Qbar grad f) and omega_H = grad^perp v3 = (d2 v3, -d1 v3).
Time stepping is Lawson's integrating-factor RK4: the diagonal operator
nu Lap + L_Q is exact, advection and the AKA coupling are explicit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .spde import (
    BlowUpError,
    SolverConfig,
    State,
    TrajectoryStats,
    _pin,
    _transport,
    aka_symbol,
    operator_symbol,
    stability_limit,
    sup_velocity,
)
from .spectral import FourierGrid

# y^perp = P y for the rotated gradient (d2, -d1)
PERP = np.array([[0.0, 1.0], [-1.0, 0.0]])
ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass(frozen=True)
class LimitParams:
    nu: float
    Qbar: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        q = np.array(self.Qbar, dtype=float)
        a = np.array(self.A, dtype=float)
        if q.shape != (2, 2) or a.shape != (2, 2):
            raise ValueError("Qbar and A must be 2x2")
        if not np.allclose(q, q.T, atol=1e-12):
            raise ValueError("Qbar must be symmetric")
        if np.linalg.eigvalsh(q).min() < -1e-12:
            raise ValueError("Qbar must be nonnegative")
        if self.nu <= 0:
            raise ValueError("viscosity must be positive")
        object.__setattr__(self, "Qbar", q)
        object.__setattr__(self, "A", a)

    @classmethod
    def from_noise(cls, nu: float, kappa: float, q0: float = 0.0) -> "LimitParams":
        """Qbar = 2 kappa I and A = 2 kappa q0 R with R the quarter turn [[0, -1], [1, 0]]."""
        return cls(nu, 2.0 * kappa * np.eye(2), 2.0 * kappa * q0 * ROTATION)


@dataclass(frozen=True)
class UniquenessVerdict:
    passed: bool
    min_eigenvalue: float
    sampled_min: float | None = None


def _nonlinear(grid: FourierGrid, om, v, aka):
    u = grid.inverse(grid.biot_savart(om))
    u1, u2 = u[..., 0, :, :], u[..., 1, :, :]
    d_om = -_transport(grid, u1, u2, om) + aka * v
    d_v = -_transport(grid, u1, u2, v)
    return _pin(d_om), _pin(d_v)


def limit_rhs(s: State, p: LimitParams, grid: FourierGrid | None = None):
    """Full right-hand sides (d_omega3, d_v3) as coefficient arrays."""
    grid = grid or FourierGrid(s.omega3.shape[-2])
    lin = operator_symbol(grid, p.nu, p.Qbar)
    d_om, d_v = _nonlinear(grid, s.omega3, s.v3, aka_symbol(grid, p.A))
    return _pin(d_om + lin * s.omega3), _pin(d_v + lin * s.v3)


class LimitStepper:
    def __init__(self, grid: FourierGrid, p: LimitParams, dt: float):
        self.grid, self.p, self.dt = grid, p, dt
        lin = operator_symbol(grid, p.nu, p.Qbar)
        self.e_full = np.exp(lin * dt)
        self.e_half = np.exp(lin * dt / 2)
        self.aka = aka_symbol(grid, p.A)

    def advance(self, s: State) -> State:
        g, h, e, e2 = self.grid, self.dt, self.e_full, self.e_half
        n = lambda om, v: _nonlinear(g, om, v, self.aka)
        w0, x0 = s.omega3, s.v3
        k1w, k1x = n(w0, x0)
        k2w, k2x = n(e2 * (w0 + h / 2 * k1w), e2 * (x0 + h / 2 * k1x))
        k3w, k3x = n(e2 * w0 + h / 2 * k2w, e2 * x0 + h / 2 * k2x)
        k4w, k4x = n(e * w0 + h * e2 * k3w, e * x0 + h * e2 * k3x)
        om = e * w0 + h / 6 * (e * k1w + 2 * e2 * (k2w + k3w) + k4w)
        v = e * x0 + h / 6 * (e * k1x + 2 * e2 * (k2x + k3x) + k4x)
        return State(_pin(om), _pin(v), s.t + h)


def run_limit(init: State, p: LimitParams, cfg: SolverConfig, observables=None, field_every: int | None = None):
    """Integrate the limit system to ``cfg.t_end``.

    Only the time-stepping fields of ``cfg`` are read; the viscosity comes from
    ``p``.  ``init`` may carry leading batch axes.  Returns the final state and
    a TrajectoryStats record (``v_dissipation`` holds the right-endpoint sum of
    2 nu |grad v3|^2 + <grad v3, Qbar grad v3>).
    """
    grid = FourierGrid(init.omega3.shape[-2])
    if cfg.check_stability:
        lim = stability_limit(grid, sup_velocity(grid, init.omega3))
        if cfg.dt > lim:
            raise ValueError(f"dt = {cfg.dt:g} exceeds the advective stability bound {lim:.3g}")
    stepper = LimitStepper(grid, p, cfg.dt)
    obs = np.zeros((0,) + grid.shape) if observables is None else np.asarray(observables)
    batch = init.omega3.shape[:-2]
    nsteps = cfg.n_steps
    every = max(1, cfg.record_every)
    nrec = nsteps // every + 1

    def arr(*extra):
        return np.zeros(batch + extra + (nrec,))

    st = TrajectoryStats(
        t=np.arange(nrec) * every * cfg.dt,
        v_energy=arr(),
        omega_energy=arr(),
        v_grad=arr(),
        omega_grad=arr(),
        omega_fourth=arr(),
        v_dissipation=arr(),
        obs_omega=arr(len(obs)),
        obs_v=arr(len(obs)),
    )
    kq = grid.k1**2 * p.Qbar[0, 0] + 2 * grid.k1 * grid.k2 * p.Qbar[0, 1] + grid.k2**2 * p.Qbar[1, 1]
    diss_symbol = 4.0 * np.pi**2 * (2.0 * p.nu * grid.ksq + kq)
    e0 = grid.norm2(init.omega3) + grid.norm2(init.v3)
    diss = np.zeros(batch)

    def record(j, s):
        eo = grid.norm2(s.omega3)
        st.v_energy[..., j] = grid.norm2(s.v3)
        st.omega_energy[..., j] = eo
        st.v_grad[..., j] = grid.grad_norm2(s.v3)
        st.omega_grad[..., j] = grid.grad_norm2(s.omega3)
        st.omega_fourth[..., j] = eo**2
        st.v_dissipation[..., j] = diss
        if len(obs):
            st.obs_omega[..., j] = grid.inner(s.omega3[..., None, :, :], obs)
            st.obs_v[..., j] = grid.inner(s.v3[..., None, :, :], obs)

    if field_every:
        nf = nsteps // field_every + 1
        st.field_t = np.arange(nf) * field_every * cfg.dt
        st.omega_fields = np.zeros(batch + (nf,) + grid.shape, dtype=complex)
        st.v_fields = np.zeros(batch + (nf,) + grid.shape, dtype=complex)

    def record_fields(j, s):
        st.omega_fields[..., j, :, :] = s.omega3
        st.v_fields[..., j, :, :] = s.v3

    s = init.copy()
    record(0, s)
    if field_every:
        record_fields(0, s)
    for it in range(1, nsteps + 1):
        s = stepper.advance(s)
        size = grid.norm2(s.omega3) + grid.norm2(s.v3)
        if not np.all(np.isfinite(size)) or np.any(size > cfg.blowup_factor * np.maximum(e0, 1e-300)):
            raise BlowUpError(f"limit run blew up at t = {s.t:.6g}")
        diss = diss + cfg.dt * np.sum(grid.weights * diss_symbol * np.abs(s.v3) ** 2, axis=(-2, -1))
        if it % every == 0:
            record(it // every, s)
        if field_every and it % field_every == 0:
            record_fields(it // field_every, s)
    st.aborted = np.zeros(batch, dtype=bool)
    return s, st


def uniqueness_matrix(p: LimitParams) -> np.ndarray:
    """Symmetric 4x4 matrix of (x, y) -> x.Qbar x + y.Qbar y + 2 x.A y^perp."""
    c = p.A @ PERP
    return np.block([[p.Qbar, c], [c.T, p.Qbar]])


def uniqueness_condition(p: LimitParams, samples: int = 0, seed: int = 0, atol: float = 1e-12) -> UniquenessVerdict:
    """Nonnegativity of the uniqueness quadratic form, exactly by eigenvalues.

    With ``samples > 0`` the form is also evaluated at random unit vectors and
    the smallest value is reported as an independent check.
    """
    m = uniqueness_matrix(p)
    lam = float(np.linalg.eigvalsh(m).min())
    sampled = None
    if samples:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((samples, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        x, y = z[:, :2], z[:, 2:]
        form = (
            np.einsum("si,ij,sj->s", x, p.Qbar, x)
            + np.einsum("si,ij,sj->s", y, p.Qbar, y)
            + 2 * np.einsum("si,ij,sj->s", x, p.A, y @ PERP.T)
        )
        sampled = float(form.min())
    return UniquenessVerdict(lam >= -atol, lam, sampled)


@dataclass(frozen=True)
class ModeProbe:
    """Linear dynamics of one Fourier mode k for (omega3_hat, v3_hat)."""

    k: tuple
    matrix: np.ndarray  # 2x2, acts on (omega_hat, v_hat)
    eigenvalues: np.ndarray
    abscissa: float  # largest instantaneous growth rate of the Euclidean norm
    direction: np.ndarray  # initial (omega_hat, v_hat) attaining it

    def propagate(self, t: float) -> np.ndarray:
        return linalg.expm(self.matrix * t)

    def growth_factor(self, t: float, x0=None) -> float:
        x0 = self.direction if x0 is None else np.asarray(x0, dtype=float)
        return float(np.linalg.norm(self.propagate(t) @ x0) / np.linalg.norm(x0))


def aka_mode_probe(p: LimitParams, k=(1, 0)) -> ModeProbe:
    """Two-by-two linear system of a single mode k.

    For a single mode the nonlinearity vanishes identically (v_H is parallel to
    the level lines of both fields), so the mode obeys
        omega' = -lam omega + a v,   v' = -lam v,
    with lam = 4 pi^2 nu |k|^2 + 2 pi^2 k.Qbar k and a = -4 pi^2 k.A k^perp.
    The system is a Jordan block: eigenvalues are -lam (double), while the
    norm can grow transiently at rate -lam + |a|/2 when |a| > 2 lam.
    """
    k1, k2 = map(float, k)
    kvec = np.array([k1, k2])
    lam = 4 * np.pi**2 * p.nu * (k1 * k1 + k2 * k2) + 2 * np.pi**2 * kvec @ p.Qbar @ kvec
    a = -4 * np.pi**2 * kvec @ p.A @ np.array([k2, -k1])
    mat = np.array([[-lam, a], [0.0, -lam]])
    sym = 0.5 * (mat + mat.T)
    w, vecs = np.linalg.eigh(sym)
    return ModeProbe((k1, k2), mat, np.linalg.eigvals(mat), float(w[-1]), vecs[:, -1])


def single_mode_state(grid: FourierGrid, k, omega_amp: float, v_amp: float) -> State:
    """State with omega3 = omega_amp cos(2 pi k.x) and v3 = v_amp cos(2 pi k.x)."""
    x1, x2 = grid.points()
    c = np.cos(2 * np.pi * (k[0] * x1 + k[1] * x2))
    return State(grid.forward(omega_amp * c), grid.forward(v_amp * c), 0.0)
