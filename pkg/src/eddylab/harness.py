"""Ensemble studies along an ell-ladder: weak errors, martingale variances, reports.

Every trajectory draws from its own stream, derived purely from
(seed_root, ell index, trajectory index).  Trajectories are grouped into
fixed-size batches defined by the plan, so results do not depend on the
number of worker processes, and all reductions run in trajectory order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .limit import LimitParams, run_limit
from .noise import NoiseSpec, build_spectral_noise, covariance_tables, hypothesis_report
from .profiles import Bump, build_profile
from .spde import SolverConfig, State, default_initial_state, run_trajectory
from .spectral import FourierGrid

TWO_PI = 2.0 * np.pi
DEFAULT_OBSERVABLES = ("cos_x2", "sin_x1_cos_x2", "cos_x1", "sin_x2", "cos_x1_x2", "bump")
ABORT_FRACTION = 0.01

# -- observables -----------------------------------------------------------

_TRIG = {
    "cos_x1": lambda x1, x2: (np.cos(TWO_PI * x1), TWO_PI),
    "sin_x1": lambda x1, x2: (np.sin(TWO_PI * x1), TWO_PI),
    "cos_x2": lambda x1, x2: (np.cos(TWO_PI * x2), TWO_PI),
    "sin_x2": lambda x1, x2: (np.sin(TWO_PI * x2), TWO_PI),
    "sin_x1_cos_x2": lambda x1, x2: (np.sin(TWO_PI * x1) * np.cos(TWO_PI * x2), TWO_PI),
    "cos_x1_x2": lambda x1, x2: (np.cos(TWO_PI * (x1 + x2)), TWO_PI * np.sqrt(2.0)),
}
BUMP_RADIUS = 0.3


def _bump_observable(x1, x2):
    """Unit-peak smooth bump of radius 0.3 centred at (1/2, 1/2)."""
    r = BUMP_RADIUS
    s = np.hypot(x1 - 0.5, x2 - 0.5)
    t = np.minimum(s / r, 1.0)
    val = np.where(t < 1, np.exp(1.0 - 1.0 / np.maximum(1e-300, 1.0 - t**2)), 0.0)
    # sup of |d/ds| on a dense radial grid: e^{1-1/(1-t^2)} 2t / (r (1-t^2)^2)
    tt = np.linspace(0.0, 1.0, 200001)[:-1]
    d = np.exp(1.0 - 1.0 / (1.0 - tt**2)) * 2 * tt / (r * (1.0 - tt**2) ** 2)
    return val, float(d.max())


@dataclass(frozen=True)
class ObservableSet:
    """Named test functions with coefficients, real-space gradients and sup |grad|."""

    names: tuple
    coeffs: np.ndarray  # (m, n, n//2+1)
    grads: np.ndarray  # (m, 2, n, n)
    grad_sup: np.ndarray  # (m,)

    def __len__(self):
        return len(self.names)


def build_observables(grid: FourierGrid, names=DEFAULT_OBSERVABLES) -> ObservableSet:
    x1, x2 = grid.points()
    coeffs, sups = [], []
    for name in names:
        if name == "bump":
            vals, sup = _bump_observable(x1, x2)
        elif name in _TRIG:
            vals, sup = _TRIG[name](x1, x2)
        else:
            raise ValueError(f"unknown observable {name!r}")
        coeffs.append(grid.forward(vals))
        sups.append(sup)
    coeffs = np.array(coeffs)
    grads = grid.inverse(grid.gradient(coeffs))
    return ObservableSet(tuple(names), coeffs, grads, np.array(sups))


# -- plans and manifests ---------------------------------------------------


def noise_to_dict(spec: NoiseSpec) -> dict:
    return dict(
        ell=spec.ell,
        kappa=spec.kappa,
        rule=spec.rule,
        q0=spec.q0,
        p=spec.p,
        c=spec.c,
        r=spec.profile.theta.radius,
        r_chi=spec.profile.chi.radius,
    )


def noise_from_dict(d: dict) -> NoiseSpec:
    d = dict(d)
    prof = build_profile("bump", d.pop("r", 0.35), d.pop("r_chi", None))
    return NoiseSpec(profile=prof, **d)


def config_from_dict(d: dict) -> SolverConfig:
    names = {f.name for f in fields(SolverConfig)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown solver options {sorted(unknown)}")
    return SolverConfig(**d)


@dataclass(frozen=True)
class ExperimentPlan:
    """Inputs of a scaling-limit study.

    ``noise`` is the template whose ``ell`` is replaced along ``ladder``.
    ``checkpoint_every`` (steps) fixes where mean fields are compared with the
    limit model; ``batch_size`` fixes how trajectories are vectorized.
    ``alt_q0`` names the alternative limit model for the AKA discrimination.
    """

    ladder: tuple
    ensemble_size: int
    cfg: SolverConfig
    noise: NoiseSpec
    observables: tuple = DEFAULT_OBSERVABLES
    seed_root: int = 0
    batch_size: int = 16
    checkpoint_every: int = 50
    martingale: bool = False
    alt_q0: float | None = None
    fourth_moment_cap: float | None = None

    def __post_init__(self):
        ladder = tuple(float(x) for x in self.ladder)
        if any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ValueError("ladder must be strictly decreasing")
        if self.ensemble_size < 2:
            raise ValueError("ensemble_size must be at least 2")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be positive")
        object.__setattr__(self, "ladder", ladder)
        object.__setattr__(self, "observables", tuple(self.observables))

    def to_dict(self) -> dict:
        return dict(
            ladder=list(self.ladder),
            ensemble_size=self.ensemble_size,
            cfg=asdict(self.cfg),
            noise=noise_to_dict(self.noise),
            observables=list(self.observables),
            seed_root=self.seed_root,
            batch_size=self.batch_size,
            checkpoint_every=self.checkpoint_every,
            martingale=self.martingale,
            alt_q0=self.alt_q0,
            fourth_moment_cap=self.fourth_moment_cap,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        d["cfg"] = config_from_dict(d.get("cfg", {}))
        d["noise"] = noise_from_dict(d["noise"])
        d["ladder"] = tuple(d["ladder"])
        d["observables"] = tuple(d.get("observables", DEFAULT_OBSERVABLES))
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def spec_at(self, index: int) -> NoiseSpec:
        return self.noise.with_ell(self.ladder[index])

    def limit_params(self, q0: float | None = None) -> LimitParams:
        """Qbar = 2 kappa I; A from the vertical-intensity rule unless ``q0`` is given."""
        if q0 is None:
            q0 = self.noise.q0 if self.noise.rule == "proportional" else 0.0
        return LimitParams.from_noise(self.cfg.nu, self.noise.kappa, q0)


def trajectory_stream(seed_root: int, ell_index: int, traj_index: int) -> np.random.Generator:
    """The random stream of one trajectory; a pure function of its three indices."""
    return np.random.default_rng(np.random.SeedSequence(int(seed_root), spawn_key=(int(ell_index), int(traj_index))))


@dataclass
class RunManifest:
    plan: dict
    plan_digest: str
    streams: list  # [seed_root, ell_index, first, last] ranges of spawn keys
    versions: dict
    grid: dict
    wall_clock: float = 0.0
    outputs: dict = field(default_factory=dict)  # file name -> sha256

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _versions():
    return dict(eddylab=__version__, numpy=np.__version__, scipy=scipy.__version__, python=platform.python_version())


# -- ensembles ---------------------------------------------------------------


@dataclass
class EnsembleStats:
    """Ensemble summaries at one ell.  Observable arrays are (2, n_obs, n_rec),
    the first axis being (omega3, v3)."""

    ell: float
    n_traj: int
    aborted: int
    t: np.ndarray
    obs_mean: np.ndarray
    obs_var: np.ndarray
    energy_mean: dict
    field_t: np.ndarray
    omega_mean_field: np.ndarray  # (n_field, n, n//2+1)
    v_mean_field: np.ndarray
    qv_mean: np.ndarray | None = None  # (3, n_obs, n_rec)
    qv_var: np.ndarray | None = None
    fourth_moment_ok: bool = True
    opnorm_QH: float = 0.0
    opnorm_Q3: float = 0.0
    grad_QH3_0: np.ndarray | None = None

    @property
    def failed(self) -> bool:
        return self.aborted > ABORT_FRACTION * self.n_traj


def _batch_job(args):
    plan_dict, ell_index, first, last = args
    plan = ExperimentPlan.from_dict(plan_dict)
    return _run_batch(plan, ell_index, first, last)


def _run_batch(plan: ExperimentPlan, ell_index: int, first: int, last: int):
    cfg = plan.cfg
    grid = FourierGrid(cfg.n)
    sn = build_spectral_noise(plan.spec_at(ell_index), grid)
    ct = covariance_tables(sn)
    obs = build_observables(grid, plan.observables)
    nb = last - first
    init = default_initial_state(grid, (nb,))
    rngs = [trajectory_stream(plan.seed_root, ell_index, j) for j in range(first, last)]
    _, st = run_trajectory(
        init,
        cfg,
        sn,
        ct,
        rngs=rngs,
        observables=obs.coeffs,
        qv_observables=obs.coeffs if plan.martingale else None,
        field_every=plan.checkpoint_every,
    )
    alive = ~st.aborted
    keep = alive[:, None, None, None]
    return dict(
        t=st.t,
        obs=np.stack([st.obs_omega, st.obs_v], axis=1),  # (B, 2, n_obs, n_rec)
        energy=dict(
            v_energy=st.v_energy,
            omega_energy=st.omega_energy,
            v_grad=st.v_grad,
            omega_grad=st.omega_grad,
            omega_fourth=st.omega_fourth,
            v_dissipation=st.v_dissipation,
        ),
        qv=st.qv,
        field_t=st.field_t,
        omega_sum=np.sum(np.where(keep, st.omega_fields, 0.0), axis=0),
        v_sum=np.sum(np.where(keep, st.v_fields, 0.0), axis=0),
        aborted=st.aborted,
        ct=(ct.opnorm_QH, ct.opnorm_Q3, ct.grad_QH3_0),
    )


def _batches(plan: ExperimentPlan):
    n, b = plan.ensemble_size, plan.batch_size
    return [(lo, min(n, lo + b)) for lo in range(0, n, b)]


def ensemble_run(plan: ExperimentPlan, ell_index: int, workers: int = 1) -> EnsembleStats:
    """Run all trajectories at ``plan.ladder[ell_index]`` and reduce in index order."""
    jobs = [(plan.to_dict(), ell_index, lo, hi) for lo, hi in _batches(plan)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_batch_job, jobs))
    else:
        parts = [_run_batch(plan, ell_index, lo, hi) for _, _, lo, hi in jobs]

    aborted = np.concatenate([p["aborted"] for p in parts])
    alive = ~aborted
    obs = np.concatenate([p["obs"] for p in parts])[alive]
    n_alive = int(alive.sum())
    energy = {}
    for k in parts[0]["energy"]:
        arr = np.concatenate([p["energy"][k] for p in parts])[alive]
        energy[k] = arr.mean(axis=0) if n_alive else np.full(arr.shape[1:], np.nan)
        if k == "v_energy":
            total = arr + np.concatenate([p["energy"]["v_dissipation"] for p in parts])[alive]
            energy["v_total_var"] = total.var(axis=0, ddof=1) if n_alive > 1 else np.full(arr.shape[1:], np.nan)
    qv_mean = qv_var = None
    if parts[0]["qv"] is not None:
        qv = np.concatenate([p["qv"] for p in parts])[alive]
        if n_alive > 1:
            qv_mean, qv_var = qv.mean(axis=0), qv.var(axis=0, ddof=1)
    om_sum = sum(p["omega_sum"] for p in parts)
    v_sum = sum(p["v_sum"] for p in parts)
    opn_h, opn_3, grad = parts[0]["ct"]
    fourth_ok = True
    if plan.fourth_moment_cap is not None:
        grid = FourierGrid(plan.cfg.n)
        init = default_initial_state(grid)
        cap = plan.fourth_moment_cap * (grid.norm2(init.omega3) ** 2 + grid.norm2(init.v3) ** 2)
        fourth_ok = bool(np.all(energy["omega_fourth"] <= cap))
    return EnsembleStats(
        ell=plan.ladder[ell_index],
        n_traj=len(aborted),
        aborted=int(aborted.sum()),
        t=parts[0]["t"],
        obs_mean=obs.mean(axis=0) if n_alive else np.full(obs.shape[1:], np.nan),
        obs_var=obs.var(axis=0, ddof=1) if n_alive > 1 else np.full(obs.shape[1:], np.nan),
        energy_mean=energy,
        field_t=parts[0]["field_t"],
        omega_mean_field=om_sum / max(n_alive, 1),
        v_mean_field=v_sum / max(n_alive, 1),
        qv_mean=qv_mean,
        qv_var=qv_var,
        fourth_moment_ok=fourth_ok,
        opnorm_QH=float(opn_h),
        opnorm_Q3=float(opn_3),
        grad_QH3_0=np.asarray(grad),
    )


# -- limit reference -------------------------------------------------------


@dataclass
class LimitReference:
    params: LimitParams
    t: np.ndarray
    obs: np.ndarray  # (2, n_obs, n_rec)
    field_t: np.ndarray
    omega_fields: np.ndarray
    v_fields: np.ndarray


def limit_reference(plan: ExperimentPlan, q0: float | None = None) -> LimitReference:
    grid = FourierGrid(plan.cfg.n)
    obs = build_observables(grid, plan.observables)
    p = plan.limit_params(q0)
    _, st = run_limit(default_initial_state(grid), p, plan.cfg, observables=obs.coeffs, field_every=plan.checkpoint_every)
    return LimitReference(p, st.t, np.stack([st.obs_omega, st.obs_v]), st.field_t, st.omega_fields, st.v_fields)


def as_fake_ensemble(ref: LimitReference, ell: float = 0.0, n_traj: int = 2) -> EnsembleStats:
    """Wrap a limit run as a zero-variance ensemble (self-comparison control)."""
    return EnsembleStats(
        ell=ell,
        n_traj=n_traj,
        aborted=0,
        t=ref.t,
        obs_mean=ref.obs.copy(),
        obs_var=np.zeros_like(ref.obs),
        energy_mean={},
        field_t=ref.field_t,
        omega_mean_field=ref.omega_fields.copy(),
        v_mean_field=ref.v_fields.copy(),
    )


# -- diagnostics -----------------------------------------------------------


@dataclass
class WeakError:
    """Per-observable weak errors; arrays are (2, n_obs) for (omega3, v3) pairings."""

    ell: float
    error: np.ndarray  # time average over records of |mean - limit|
    stderr: np.ndarray  # matching time average of the Monte Carlo standard error
    final_error: np.ndarray
    final_stderr: np.ndarray
    field_distance: float  # discrete L2(0,T;L2) distance of mean fields


def weak_error(ens: EnsembleStats, ref: LimitReference, grid: FourierGrid | None = None) -> WeakError:
    if not np.allclose(ens.t, ref.t):
        raise ValueError("ensemble and limit records are on different times")
    n_alive = ens.n_traj - ens.aborted
    diff = np.abs(ens.obs_mean - ref.obs)
    se = np.sqrt(np.maximum(ens.obs_var, 0.0) / max(n_alive, 1))
    grid = grid or FourierGrid(ens.omega_mean_field.shape[-2])
    d2 = grid.norm2(ens.omega_mean_field - ref.omega_fields) + grid.norm2(ens.v_mean_field - ref.v_fields)
    ft = ens.field_t
    dist = float(np.sqrt(np.trapezoid(d2, ft))) if len(ft) > 1 else float(np.sqrt(d2[0]))
    return WeakError(ens.ell, diff.mean(axis=-1), se.mean(axis=-1), diff[..., -1], se[..., -1], dist)


@dataclass
class MartingaleBound:
    ell: float
    estimate: np.ndarray  # (3, n_obs): E[M(T)^2] for (v3 transport, omega3 transport, stretching)
    stderr: np.ndarray
    bound: np.ndarray
    passed: np.ndarray


def martingale_variance(plan: ExperimentPlan, ens: EnsembleStats, obs: ObservableSet | None = None) -> MartingaleBound:
    """E[M(T)^2] from accumulated quadratic variation, against its a-priori bound.

    Bounds, with s = sup|grad phi|:
      transport on v3:   opnorm_QH s^2 T |v3(0)|^2
      transport on w3:   opnorm_QH s^2 E int_0^T |omega3|^2
      stretching:        opnorm_Q3 s^2 |v3(0)|^2 / (2 nu)
    A bound passes if estimate - 3 stderr <= bound.
    """
    if ens.qv_mean is None:
        raise ValueError("ensemble was run without quadratic-variation accumulation")
    grid = FourierGrid(plan.cfg.n)
    obs = obs or build_observables(grid, plan.observables)
    init = default_initial_state(grid)
    v0 = float(grid.norm2(init.v3))
    t_end = ens.t[-1]
    s2 = obs.grad_sup**2
    om_int = float(np.trapezoid(ens.energy_mean["omega_energy"], ens.t))
    bound = np.stack(
        [
            ens.opnorm_QH * s2 * t_end * v0,
            ens.opnorm_QH * s2 * om_int,
            ens.opnorm_Q3 * s2 * v0 / (2 * plan.cfg.nu),
        ]
    )
    n_alive = ens.n_traj - ens.aborted
    est = ens.qv_mean[..., -1]
    se = np.sqrt(ens.qv_var[..., -1] / max(n_alive, 1))
    return MartingaleBound(ens.ell, est, se, bound, est - 3 * se <= bound)


def energy_excess(plan: ExperimentPlan, ens: EnsembleStats) -> float:
    """Largest violation of the mean v3 energy inequality over the records.

    Allowance: scheme tolerance 10 dt per unit time plus three Monte Carlo
    standard errors of the mean of |v3|^2 + dissipation.
    """
    em = ens.energy_mean
    n_alive = ens.n_traj - ens.aborted
    se = np.sqrt(np.nan_to_num(em["v_total_var"]) / max(n_alive, 1))
    allow = em["v_energy"][0] * (1 + 10 * plan.cfg.dt * ens.t) + 3 * se
    return float(np.max(em["v_energy"] + em["v_dissipation"] - allow))


def monotone_decrease(values, stderrs, k: float = 2.0) -> bool:
    """True unless some step along the ladder increases by more than k combined stderrs."""
    v = np.asarray(values, float)
    s = np.asarray(stderrs, float)
    steps = v[1:] - v[:-1]
    slack = k * np.sqrt(s[1:] ** 2 + s[:-1] ** 2)
    return bool(np.all(steps <= slack))


# -- full study and report ----------------------------------------------------


@dataclass
class StudyResults:
    plan: ExperimentPlan
    ensembles: list
    reference: LimitReference | None
    alternative: LimitReference | None
    weak: list
    weak_alt: list
    martingale: list
    hypothesis: list
    verdicts: dict
    partial: list


def run_study(plan: ExperimentPlan, workers: int = 1) -> StudyResults:
    ens, weak, weak_alt, mart, partial = [], [], [], [], []
    ref = alt = None
    hyp = []
    if plan.ladder:
        grid = FourierGrid(plan.cfg.n)
        ref = limit_reference(plan)
        if plan.alt_q0 is not None:
            alt = limit_reference(plan, plan.alt_q0)
        if len(plan.ladder) >= 3:
            hyp = hypothesis_report([plan.spec_at(i) for i in range(len(plan.ladder))], lambda ell: grid)
        for i in range(len(plan.ladder)):
            e = ensemble_run(plan, i, workers)
            ens.append(e)
            if e.failed:
                partial.append(dict(ell=e.ell, reason=f"{e.aborted} of {e.n_traj} trajectories aborted"))
            weak.append(weak_error(e, ref, grid))
            if alt is not None:
                weak_alt.append(weak_error(e, alt, grid))
            if plan.martingale:
                mart.append(martingale_variance(plan, e))
    verdicts = _verdicts(plan, ens, weak, weak_alt, mart, hyp, ref)
    return StudyResults(plan, ens, ref, alt, weak, weak_alt, mart, hyp, verdicts, partial)


def _verdicts(plan, ens, weak, weak_alt, mart, hyp, ref):
    v = {}
    if not ens:
        return v
    err = np.array([w.error for w in weak])  # (L, 2, n_obs)
    se = np.array([w.stderr for w in weak])
    mono = [
        monotone_decrease(err[:, f, j], se[:, f, j]) for f in range(err.shape[1]) for j in range(err.shape[2])
    ]
    v["weak_error_monotone"] = bool(all(mono))
    v["no_abort_excess"] = bool(all(not e.failed for e in ens))
    v["mean_energy_inequality"] = bool(all(energy_excess(plan, e) <= 1e-12 for e in ens))
    if weak_alt:
        own = np.array([w.field_distance for w in weak])
        other = np.array([w.field_distance for w in weak_alt])
        v["aka_discrimination"] = bool(np.all(own < other))
    if mart:
        v["martingale_bounds"] = bool(all(np.all(m.passed) for m in mart))
        est = np.array([m.estimate for m in mart])
        mse = np.array([m.stderr for m in mart])
        v["martingale_decay"] = bool(np.all(np.diff(est, axis=0) < 0))
    if hyp:
        ver = hyp[-1]["verdicts"]
        v["hypothesis_a"] = ver["a_limit_QH0"]
        v["hypothesis_b"] = ver["b_opnorms_vanish"]
        v["hypothesis_d"] = ver["d_hess_bounded"]
        grads = np.array([r["grad_QH3_0"] for r in hyp[:-1]])
        gap = np.abs(grads[-1] - ref.params.A).max()
        v["limit_matrix_consistent"] = bool(gap <= 0.25 * 2 * plan.noise.kappa)
    return v


def empirical_slopes(ladder, weak) -> np.ndarray:
    """Least-squares slope of log(error) against log(ell), per (field, observable).

    Reported only; no rate is asserted.
    """
    err = np.array([w.error for w in weak])
    x = np.log(np.asarray(ladder, float))
    y = np.log(np.maximum(err, 1e-300)).reshape(len(x), -1)
    slope = np.polyfit(x, y, 1)[0] if len(x) >= 2 else np.full(y.shape[1], np.nan)
    return slope.reshape(err.shape[1:])


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def report(plan: ExperimentPlan, results: StudyResults, out_dir, wall_clock: float = 0.0) -> RunManifest:
    """Write summary.json, CSV tables and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = plan.observables
    files = {}

    rows = []
    for w, wa in zip(results.weak, results.weak_alt or [None] * len(results.weak)):
        for f, fname in enumerate(("omega3", "v3")):
            for j, name in enumerate(names):
                rows.append(
                    [
                        w.ell,
                        fname,
                        name,
                        w.error[f, j],
                        w.stderr[f, j],
                        w.final_error[f, j],
                        w.final_stderr[f, j],
                        w.field_distance,
                        wa.field_distance if wa is not None else "",
                    ]
                )
    files["weak_errors.csv"] = _csv_text(
        ["ell", "field", "observable", "error", "stderr", "final_error", "final_stderr", "field_distance", "field_distance_alt"],
        rows,
    )

    rows = []
    for e in results.ensembles:
        for k, t in enumerate(e.t):
            row = [e.ell, t]
            row += [e.energy_mean[key][k] for key in ("v_energy", "v_dissipation", "omega_energy", "v_grad", "omega_grad", "omega_fourth")]
            for f in range(2):
                row += list(e.obs_mean[f, :, k])
            rows.append(row)
    obs_cols = [f"mean_{fn}_{n}" for fn in ("omega3", "v3") for n in names]
    files["ensemble_timeseries.csv"] = _csv_text(
        ["ell", "t", "v_energy", "v_dissipation", "omega_energy", "v_grad", "omega_grad", "omega_fourth"] + obs_cols, rows
    )

    if results.martingale:
        rows = []
        fam = ("transport_v3", "transport_omega3", "stretching")
        for m in results.martingale:
            for a in range(3):
                for j, name in enumerate(names):
                    rows.append([m.ell, fam[a], name, m.estimate[a, j], m.stderr[a, j], m.bound[a, j], bool(m.passed[a, j])])
        files["martingale.csv"] = _csv_text(["ell", "family", "observable", "estimate", "stderr", "bound", "passed"], rows)

    if results.hypothesis:
        rows = []
        for r in results.hypothesis[:-1]:
            g = r["grad_QH3_0"]
            rows.append([r["ell"], r["Gamma"], r["gamma"], r["opnorm_QH"], r["opnorm_Q3"], g[0][0], g[0][1], g[1][0], g[1][1], r["hess_Q3_norm"]])
        files["hypothesis.csv"] = _csv_text(
            ["ell", "Gamma", "gamma", "opnorm_QH", "opnorm_Q3", "dQ13_d1", "dQ13_d2", "dQ23_d1", "dQ23_d2", "hess_Q3_norm"], rows
        )

    summary = dict(
        surrogate_note="these verdicts are a surrogate for convergence in law on L2(0,T;L2): weak errors on a finite observable set, martingale variance decay and trend monotonicity",
        plan_digest=plan.digest(),
        limit=dict(
            Qbar=results.reference.params.Qbar.tolist() if results.reference else None,
            A=results.reference.params.A.tolist() if results.reference else None,
            A_alternative=results.alternative.params.A.tolist() if results.alternative else None,
        ),
        hypothesis_verdicts=results.hypothesis[-1]["verdicts"] if results.hypothesis else {},
        weak_error_slopes=(
            {f: dict(zip(names, map(float, row))) for f, row in zip(("omega3", "v3"), empirical_slopes(plan.ladder, results.weak))}
            if len(results.weak) >= 2
            else {}
        ),
        verdicts=results.verdicts,
        partial=results.partial,
        all_passed=bool(all(results.verdicts.values())) and not results.partial,
    )
    files["summary.json"] = json.dumps(summary, indent=2, sort_keys=True) + "\n"

    for name, text in files.items():
        (out / name).write_text(text)
    manifest = RunManifest(
        plan=plan.to_dict(),
        plan_digest=plan.digest(),
        streams=[[plan.seed_root, i, 0, plan.ensemble_size - 1] for i in range(len(plan.ladder))],
        versions=_versions(),
        grid=dict(n=plan.cfg.n, dt=plan.cfg.dt, t_end=plan.cfg.t_end, scheme=plan.cfg.scheme, batch_size=plan.batch_size),
        wall_clock=wall_clock,
        outputs={name: hashlib.sha256(text.encode()).hexdigest() for name, text in files.items()},
    )
    (out / "manifest.json").write_text(manifest.to_json() + "\n")
    return manifest


def execute(plan: ExperimentPlan, out_dir, workers: int = 1) -> tuple[StudyResults, RunManifest]:
    t0 = time.perf_counter()
    res = run_study(plan, workers)
    man = report(plan, res, out_dir, wall_clock=time.perf_counter() - t0)
    return res, man


def replay(manifest_path, out_dir, workers: int = 1):
    """Re-execute a run from its manifest; returns (manifest, mismatched CSV names)."""
    old = RunManifest.load(manifest_path)
    plan = ExperimentPlan.from_dict(old.plan)
    if plan.digest() != old.plan_digest:
        raise ValueError("manifest plan does not match its digest")
    _, new = execute(plan, out_dir, workers)
    bad = sorted(k for k in old.outputs if k.endswith(".csv") and new.outputs.get(k) != old.outputs[k])
    return new, bad


# -- snapshots -----------------------------------------------------------------


def write_snapshot(path, fhat: np.ndarray, name: str, t: float) -> None:
    """One JSON header line, then the raw complex128 coefficients, row-major over k."""
    fhat = np.ascontiguousarray(fhat, dtype="<c16")
    n = fhat.shape[-2]
    header = dict(n=n, time=float(t), field=name, layout="rfft2 coefficients, shape (n, n//2+1), row-major over (k1, k2)", dtype="complex128-le")
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(fhat.tobytes())


def read_snapshot(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype="<c16")
    n = header["n"]
    return header, data.reshape(n, n // 2 + 1).copy()


def cpu_count() -> int:
    return os.cpu_count() or 1
