"""The eight acceptance criteria at their stated tolerances.

Each test prints one PASS/FAIL line (visible without -s) before asserting.
Wall-clock times are printed next to the verdicts; they are not asserted.
"""

import time

import numpy as np
import pytest

from eddylab.asymptotics import annulus_bounds, annulus_integral, pair_integral
from eddylab.harness import ExperimentPlan, execute, replay, run_study
from eddylab.limit import LimitParams, uniqueness_condition
from eddylab.noise import (
    NoiseSpec,
    build_spectral_noise,
    calibrate_gamma,
    corrector_divergence,
    corrector_sum,
    covariance_tables,
    hypothesis_report,
    structure_checks,
)
from eddylab.profiles import build_profile
from eddylab.spde import SolverConfig, default_initial_state, run_trajectory
from eddylab.spectral import FourierGrid

KAPPA = 0.25


@pytest.fixture
def verdict(capsys):
    def emit(number, name, passed, detail, started):
        with capsys.disabled():
            tag = "PASS" if passed else "FAIL"
            print(f"\n[acceptance {number}] {tag}  {name} ({time.perf_counter() - started:.1f} s): {detail}")
        assert passed, detail

    return emit


def test_1_covariance_structure(verdict):
    t0 = time.perf_counter()
    g = FourierGrid(128)
    sn = build_spectral_noise(NoiseSpec(1 / 16, kappa=KAPPA, q0=1.0, profile=build_profile("bump", 0.35)), g)
    ct = covariance_tables(sn)
    d = structure_checks(ct, sn)
    ok = (
        d["QH0"] <= 1e-8
        and max(d["parity_QH"], d["parity_Q3"], d["parity_QH3"]) <= 1e-10
        and d["transpose"] <= 1e-10
        and d["rank_one"] <= 1e-10
    )
    detail = ", ".join(f"{k}={d[k]:.1e}" for k in ("QH0", "parity_QH", "parity_Q3", "parity_QH3", "transpose", "rank_one"))
    verdict(1, "covariance structure", ok, detail, t0)


def test_2_corrector_identity(verdict):
    t0 = time.perf_counter()
    g = FourierGrid(64)
    sn = build_spectral_noise(NoiseSpec(1 / 8, kappa=KAPPA, q0=1.0), g)
    ct = covariance_tables(sn)
    rng = np.random.default_rng(2024)
    x1, x2 = g.points()
    fields = np.zeros((20, 2, g.n, g.n))
    for b in range(20):
        for _ in range(4):
            k = rng.integers(-5, 6, 2)
            amp = rng.standard_normal((2, 1, 1))
            fields[b] += amp * np.cos(2 * np.pi * (k[0] * x1 + k[1] * x2) + rng.uniform(0, 2 * np.pi))
    lhs = corrector_sum(sn, fields)
    rhs = corrector_divergence(g, ct.grad_QH3_0, fields)
    rel = np.abs(lhs - rhs).max(axis=(-2, -1)) / np.maximum(np.abs(rhs).max(axis=(-2, -1)), 1e-300)
    verdict(2, "corrector identity", bool(rel.max() <= 1e-8), f"max relative error {rel.max():.1e} over 20 fields", t0)


def test_3_asymptotics(verdict):
    t0 = time.perf_counter()
    prof = build_profile("bump", 0.35)
    theta = prof.theta
    target = 1 / (4 * np.pi)
    ladder = [2.0**-e for e in range(3, 8)]
    ratios, gscaled, offs = [], [], []
    for ell in ladder:
        d = pair_integral(theta, theta, ell, 0, 0)
        o = pair_integral(theta, theta, ell, 0, 1, n=d.n)
        gamma, _ = calibrate_gamma(prof, ell, KAPPA, FourierGrid(d.n))
        ratios.append(d.ratio)
        gscaled.append(gamma**2 * np.log(1 / ell) / (8 * np.pi * KAPPA))
        offs.append(abs(o.value) / abs(d.value))
    ratios, gscaled = np.array(ratios), np.array(gscaled)
    ann = annulus_integral(1.0, 2.0**-10)
    lo, hi = annulus_bounds(1.0, 2.0**-10)
    checks = dict(
        off_diagonal=max(offs) <= 1e-8,
        ratio_20pct=abs(ratios[-1] / target - 1) <= 0.2,
        ratio_monotone=bool(np.all(np.diff(np.abs(ratios - target)) < 0)),
        gamma_20pct=abs(gscaled[-1] - 1) <= 0.2,
        gamma_monotone=bool(np.all(np.diff(np.abs(gscaled - 1)) < 0)),
        annulus=lo <= ann <= hi,
    )
    detail = (
        f"ratio*4pi={ratios[-1] / target:.4f}, Gamma^2 log/(8 pi kappa)={gscaled[-1]:.4f}, "
        f"annulus {lo:.4f}<={ann:.4f}<={hi:.4f}, failing={[k for k, v in checks.items() if not v]}"
    )
    verdict(3, "asymptotics", all(checks.values()), detail, t0)


def test_4_limit_matrix(verdict):
    t0 = time.perf_counter()
    ladder = [2.0**-e for e in range(3, 8)]
    g = FourierGrid(1024)
    grid_for = lambda ell: g
    sub = hypothesis_report([NoiseSpec(e, kappa=KAPPA, rule="subordinate", p=1.0) for e in ladder], grid_for)
    sub_max = np.array([np.abs(r["grad_QH3_0"]).max() for r in sub[:-1]])
    checks = dict(subordinate_to_zero=bool(np.all(np.diff(sub_max) < 0)))
    for r_chi in (0.35, 0.2):
        prof = build_profile("bump", 0.35, r_chi)
        rows = hypothesis_report([NoiseSpec(e, kappa=KAPPA, q0=1.0, profile=prof) for e in ladder], grid_for)
        m = np.array([r["grad_QH3_0"] for r in rows[:-1]])
        gap = np.abs(m[:, 1, 0] - 2 * KAPPA)
        checks[f"diag_zero_rchi{r_chi}"] = bool(np.abs(m[:, [0, 1], [0, 1]]).max() <= 1e-8)
        checks[f"antisym_rchi{r_chi}"] = bool(np.abs(m[:, 0, 1] + m[:, 1, 0]).max() <= 1e-8)
        checks[f"within25_rchi{r_chi}"] = bool(gap[-1] <= 0.25 * 2 * KAPPA and abs(m[-1, 0, 1] + 2 * KAPPA) <= 0.25 * 2 * KAPPA)
        checks[f"trend_rchi{r_chi}"] = bool(np.all(np.diff(gap) <= 1e-12))
    for q0 in (-1.0, 0.0, 0.5, 1.0):
        checks[f"unique_q0={q0}"] = uniqueness_condition(LimitParams.from_noise(0.02, KAPPA, q0)).passed
    checks["not_unique_q0=1.5"] = not uniqueness_condition(LimitParams.from_noise(0.02, KAPPA, 1.5)).passed
    detail = f"subordinate max|entry| {np.round(sub_max, 4).tolist()}, failing={[k for k, v in checks.items() if not v]}"
    verdict(4, "limit matrix", all(checks.values()), detail, t0)


def test_5_spde_energy(verdict):
    t0 = time.perf_counter()
    g = FourierGrid(64)
    sn = build_spectral_noise(NoiseSpec(1 / 8, kappa=KAPPA), g)
    ct = covariance_tables(sn)
    init = default_initial_state(g, (32,))
    residual, pathwise, aborted, fourth = {}, True, False, True
    for dt in (1e-3, 5e-4):
        cfg = SolverConfig(nu=0.05, dt=dt, t_end=0.5, n=64, seed=5, scheme="ifem-exp", record_every=int(round(1e-3 / dt)))
        _, st = run_trajectory(init, cfg, sn, ct, fourth_moment_cap=10.0)
        v0 = st.v_energy[:, :1]
        total = st.v_energy + st.v_dissipation
        pathwise &= bool(np.all(total <= v0 * (1 + 10 * dt * st.t)))
        residual[dt] = float(np.mean((total[:, -1] - v0[:, 0]) / v0[:, 0]))
        aborted |= bool(st.aborted.any())
        fourth &= st.fourth_moment_ok
    ratio = residual[1e-3] / residual[5e-4]
    halves = 2 * 0.7 <= ratio <= 2 * 1.3
    ok = pathwise and halves and not aborted and fourth
    detail = (
        f"residual {residual[1e-3]:.4f} -> {residual[5e-4]:.4f} (ratio {ratio:.2f}), "
        f"pathwise={pathwise}, aborted={aborted}, fourth-moment ok={fourth}"
    )
    verdict(5, "SPDE energy", ok, detail, t0)


def test_6_martingale_decay(verdict):
    t0 = time.perf_counter()
    plan = ExperimentPlan(
        ladder=(2.0**-3, 2.0**-4, 2.0**-5),
        ensemble_size=8,
        cfg=SolverConfig(nu=0.05, dt=1e-3, t_end=0.1, n=256, record_every=10),
        noise=NoiseSpec(1 / 8, kappa=KAPPA, q0=1.0),
        batch_size=8,
        checkpoint_every=100,
        martingale=True,
        seed_root=6,
    )
    res = run_study(plan)
    est = np.array([m.estimate for m in res.martingale])
    below = all(np.all(m.passed) for m in res.martingale)
    decreasing = bool(np.all(np.diff(est, axis=0) < 0))
    worst = max(float(np.max((m.estimate + 3 * m.stderr) / m.bound)) for m in res.martingale)
    detail = f"max (estimate+3se)/bound = {worst:.3f}, all bounds={below}, all decreasing={decreasing}"
    verdict(6, "martingale decay", below and decreasing, detail, t0)


def _convergence_plan(rule, alt_q0):
    return ExperimentPlan(
        ladder=(1 / 4, 1 / 8, 1 / 16),
        ensemble_size=64,
        cfg=SolverConfig(nu=0.02, dt=2e-3, t_end=1.0, n=128, record_every=50),
        noise=NoiseSpec(1 / 4, kappa=KAPPA, rule=rule, q0=1.0, p=1.0, c=0.1),
        batch_size=16,
        checkpoint_every=50,
        alt_q0=alt_q0,
        seed_root=7,
    )


def test_7_boussinesq_convergence(verdict):
    t0 = time.perf_counter()
    out = {}
    for rule, alt in (("proportional", 0.0), ("subordinate", 1.0)):
        res = run_study(_convergence_plan(rule, alt))
        own = [w.field_distance for w in res.weak]
        other = [w.field_distance for w in res.weak_alt]
        out[rule] = dict(
            monotone=res.verdicts["weak_error_monotone"],
            discrimination=res.verdicts["aka_discrimination"],
            complete=not res.partial,
            own=np.round(own, 4).tolist(),
            other=np.round(other, 4).tolist(),
        )
    ok = all(v["monotone"] and v["discrimination"] and v["complete"] for v in out.values())
    verdict(7, "Boussinesq convergence", ok, str(out), t0)


def test_8_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    plan = ExperimentPlan(
        ladder=(1 / 4, 1 / 8, 1 / 16),
        ensemble_size=5,
        cfg=SolverConfig(nu=0.05, dt=1e-3, t_end=0.05, n=128, record_every=10),
        noise=NoiseSpec(1 / 4, kappa=KAPPA, q0=1.0),
        batch_size=2,
        checkpoint_every=25,
        martingale=True,
        alt_q0=0.0,
        seed_root=8,
    )
    _, man = execute(plan, tmp_path / "first")
    _, bad1 = replay(tmp_path / "first" / "manifest.json", tmp_path / "again")
    _, bad2 = replay(tmp_path / "first" / "manifest.json", tmp_path / "pool", workers=2)
    csvs = sorted(k for k in man.outputs if k.endswith(".csv"))
    same = all(
        (tmp_path / "first" / c).read_bytes() == (tmp_path / d / c).read_bytes() for c in csvs for d in ("again", "pool")
    )
    ok = not bad1 and not bad2 and same and len(csvs) >= 3
    verdict(8, "determinism", ok, f"{len(csvs)} CSV files reproduced byte-identically (serial and 2 workers): {ok}", t0)
