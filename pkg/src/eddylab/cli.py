"""Command line entry point: ``eddylab <subcommand> [--config cfg.json] [--seed S] [--threads T] [--out DIR]``.

The exit code is 0 exactly when every verdict of the subcommand passes.
Config files are JSON objects with optional sections ``solver``, ``noise``,
``plan``, ``limit`` and ``asymptotics``; see README for the schema.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .asymptotics import annulus_bounds, annulus_integral, pair_integral
from .limit import LimitParams, run_limit, uniqueness_condition
from .noise import (
    NoiseSpec,
    build_spectral_noise,
    calibrate_gamma,
    covariance_tables,
    hypothesis_report,
    structure_checks,
)
from .spde import BlowUpError, default_initial_state, run_trajectory
from .spectral import FourierGrid

TOL_STRUCTURE = dict(
    QH0=1e-8, parity_QH=1e-10, parity_Q3=1e-10, parity_QH3=1e-10, transpose=1e-10, rank_one=1e-10, hess_identity=1e-10
)


def _load_config(path):
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise SystemExit("config must be a JSON object")
    return cfg


def _noise(cfg) -> NoiseSpec:
    d = dict(ell=0.125)
    d.update(cfg.get("noise", {}))
    return harness.noise_from_dict(d)


def _solver(cfg, seed=None):
    d = dict(cfg.get("solver", {}))
    if seed is not None:
        d["seed"] = seed
    return harness.config_from_dict(d)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _finish(out: Path, name: str, summary: dict) -> int:
    passed = bool(all(summary["verdicts"].values()))
    summary["all_passed"] = passed
    (out / name).write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    for k, v in summary["verdicts"].items():
        print(f"{'PASS' if v else 'FAIL'}  {k}")
    return 0 if passed else 1


# -- subcommands -------------------------------------------------------------


def cmd_covariance(args, cfg, out: Path) -> int:
    spec = _noise(cfg)
    grid = FourierGrid(int(cfg.get("solver", {}).get("n", 128)))
    sn = build_spectral_noise(spec, grid)
    ct = covariance_tables(sn)
    checks = structure_checks(ct, sn)
    x1, x2 = grid.points()
    q = ct.Q.reshape(9, -1).T
    _write_csv(
        out / "covariance_table.csv",
        ["x1", "x2"] + [f"Q{a}{b}" for a in range(1, 4) for b in range(1, 4)],
        [[repr(float(a)), repr(float(b))] + [repr(float(v)) for v in row] for a, b, row in zip(x1.ravel(), x2.ravel(), q)],
    )
    grad = ct.grad_QH3_0
    verdicts = {f"{k}_within_tol": checks[k] <= tol for k, tol in TOL_STRUCTURE.items()}
    verdicts["hess_nonpositive"] = checks["hess_nonpositive"] <= 1e-12
    verdicts["grad_diagonal_zero"] = bool(max(abs(grad[0, 0]), abs(grad[1, 1])) <= 1e-8)
    verdicts["grad_antisymmetric"] = bool(abs(grad[0, 1] + grad[1, 0]) <= 1e-8)
    summary = dict(
        noise=harness.noise_to_dict(spec),
        n=grid.n,
        Gamma=sn.gamma,
        gamma=sn.gamma3,
        QH0=ct.QH0.tolist(),
        grad_QH3_0=grad.tolist(),
        hess_Q3_0=ct.hess_Q3_0.tolist(),
        opnorm_QH=ct.opnorm_QH,
        opnorm_Q3=ct.opnorm_Q3,
        defects=checks,
        verdicts=verdicts,
    )
    return _finish(out, "covariance_summary.json", summary)


def cmd_asymptotics(args, cfg, out: Path) -> int:
    a = dict(ladder=[2.0**-e for e in range(3, 8)], kappa=0.25, r=0.35, annulus_R=1.0, annulus_ell=2.0**-10)
    a.update(cfg.get("asymptotics", {}))
    spec = harness.noise_from_dict(dict(ell=a["ladder"][0], kappa=a["kappa"], r=a["r"]))
    theta = spec.profile.theta
    target = 1.0 / (4 * np.pi)
    rows = []
    for ell in a["ladder"]:
        d = pair_integral(theta, theta, ell, 0, 0)
        off = pair_integral(theta, theta, ell, 0, 1, n=d.n)
        grid = FourierGrid(d.n)
        gamma, _ = calibrate_gamma(spec.profile, ell, a["kappa"], grid)
        rows.append(
            dict(
                ell=ell,
                n=d.n,
                diagonal=d.value,
                off_diagonal=off.value,
                ratio=d.ratio,
                gamma_scaled=gamma**2 * np.log(1 / ell) / (8 * np.pi * a["kappa"]),
            )
        )
    _write_csv(
        out / "asymptotics.csv",
        list(rows[0]),
        [[repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in rows[0]] for r in rows],
    )
    ratio = np.array([r["ratio"] for r in rows])
    gs = np.array([r["gamma_scaled"] for r in rows])
    ann = annulus_integral(a["annulus_R"], a["annulus_ell"])
    lo, hi = annulus_bounds(a["annulus_R"], a["annulus_ell"])
    verdicts = dict(
        off_diagonal_vanish=all(abs(r["off_diagonal"]) <= 1e-8 * abs(r["diagonal"]) for r in rows),
        ratio_monotone=bool(np.all(np.diff(np.abs(ratio - target)) < 0)),
        ratio_within_20pct=bool(abs(ratio[-1] / target - 1) <= 0.2),
        gamma_monotone=bool(np.all(np.diff(np.abs(gs - 1)) < 0)),
        gamma_within_20pct=bool(abs(gs[-1] - 1) <= 0.2),
        annulus_bracketed=bool(lo <= ann <= hi),
    )
    summary = dict(rows=rows, annulus=dict(value=ann, lower=lo, upper=hi), target_ratio=target, verdicts=verdicts)
    return _finish(out, "asymptotics_summary.json", summary)


def cmd_simulate(args, cfg, out: Path) -> int:
    solver = _solver(cfg, args.seed)
    spec = _noise(cfg)
    batch = int(cfg.get("ensemble_size", 4))
    snap_every = cfg.get("snapshot_every")
    grid = FourierGrid(solver.n)
    sn = build_spectral_noise(spec, grid)
    ct = covariance_tables(sn)
    obs = harness.build_observables(grid, cfg.get("observables", harness.DEFAULT_OBSERVABLES))
    rngs = [harness.trajectory_stream(solver.seed, 0, j) for j in range(batch)]
    init = default_initial_state(grid, (batch,))
    final, st = run_trajectory(init, solver, sn, ct, rngs=rngs, observables=obs.coeffs, field_every=snap_every)
    header = ["trajectory", "t", "v_energy", "v_dissipation", "omega_energy", "v_grad", "omega_grad", "omega_fourth"]
    header += [f"omega3_{n}" for n in obs.names] + [f"v3_{n}" for n in obs.names]
    rows = []
    for b in range(batch):
        for k, t in enumerate(st.t):
            vals = [st.v_energy, st.v_dissipation, st.omega_energy, st.v_grad, st.omega_grad, st.omega_fourth]
            row = [b, repr(float(t))] + [repr(float(v[b, k])) for v in vals]
            row += [repr(float(x)) for x in st.obs_omega[b, :, k]] + [repr(float(x)) for x in st.obs_v[b, :, k]]
            rows.append(row)
    _write_csv(out / "timeseries.csv", header, rows)
    if snap_every:
        for b in range(batch):
            for j, t in enumerate(st.field_t):
                harness.write_snapshot(out / f"omega3_traj{b}_{j:04d}.bin", st.omega_fields[b, j], "omega3", t)
                harness.write_snapshot(out / f"v3_traj{b}_{j:04d}.bin", st.v_fields[b, j], "v3", t)
    v0 = grid.norm2(init.v3[0])
    excess = st.v_energy + st.v_dissipation - v0 * (1 + 10 * solver.dt * st.t)
    verdicts = dict(
        no_aborts=not bool(np.any(st.aborted)),
        energy_inequality=bool(np.all(excess <= 1e-12)),
    )
    summary = dict(
        solver=harness.asdict(solver),
        noise=harness.noise_to_dict(spec),
        ensemble_size=batch,
        aborted=st.aborted.tolist(),
        max_energy_excess=float(excess.max()),
        verdicts=verdicts,
    )
    return _finish(out, "simulate_summary.json", summary)


def cmd_limit(args, cfg, out: Path) -> int:
    solver = _solver(cfg, args.seed)
    lim = dict(kappa=0.25, q0=0.0)
    lim.update(cfg.get("limit", {}))
    if "Qbar" in lim or "A" in lim:
        p = LimitParams(solver.nu, lim.get("Qbar", 2 * lim["kappa"] * np.eye(2)), lim.get("A", np.zeros((2, 2))))
    else:
        p = LimitParams.from_noise(solver.nu, lim["kappa"], lim["q0"])
    grid = FourierGrid(solver.n)
    obs = harness.build_observables(grid, cfg.get("observables", harness.DEFAULT_OBSERVABLES))
    uq = uniqueness_condition(p, samples=1000, seed=solver.seed)
    blew_up = False
    try:
        _, st = run_limit(default_initial_state(grid), p, solver, observables=obs.coeffs)
    except BlowUpError as exc:
        blew_up, st = str(exc), None
    if st is not None:
        header = ["t", "v_energy", "v_dissipation", "omega_energy"]
        header += [f"omega3_{n}" for n in obs.names] + [f"v3_{n}" for n in obs.names]
        rows = [
            [repr(float(t)), repr(float(st.v_energy[k])), repr(float(st.v_dissipation[k])), repr(float(st.omega_energy[k]))]
            + [repr(float(x)) for x in st.obs_omega[:, k]]
            + [repr(float(x)) for x in st.obs_v[:, k]]
            for k, t in enumerate(st.t)
        ]
        _write_csv(out / "limit_timeseries.csv", header, rows)
    summary = dict(
        Qbar=p.Qbar.tolist(),
        A=p.A.tolist(),
        nu=p.nu,
        uniqueness=dict(min_eigenvalue=uq.min_eigenvalue, sampled_min=uq.sampled_min),
        blow_up=blew_up,
        verdicts=dict(uniqueness_condition=uq.passed, completed=not blew_up),
    )
    return _finish(out, "limit_summary.json", summary)


def _plan(cfg, seed=None) -> harness.ExperimentPlan:
    d = dict(cfg.get("plan", {}))
    d.setdefault("ladder", [0.25, 0.125, 0.0625])
    d.setdefault("ensemble_size", 16)
    d["cfg"] = harness.asdict(_solver(cfg))
    d["noise"] = harness.noise_to_dict(_noise(cfg))
    if seed is not None:
        d["seed_root"] = seed
    return harness.ExperimentPlan.from_dict(d)


def cmd_converge(args, cfg, out: Path) -> int:
    plan = _plan(cfg, args.seed)
    res, _ = harness.execute(plan, out, workers=args.threads)
    for k, v in res.verdicts.items():
        print(f"{'PASS' if v else 'FAIL'}  {k}")
    for p in res.partial:
        print(f"PARTIAL  ell={p['ell']}: {p['reason']}")
    return 0 if all(res.verdicts.values()) and not res.partial else 1


def cmd_report(args, cfg, out: Path) -> int:
    manifest = args.manifest or cfg.get("manifest")
    if manifest is None:
        raise SystemExit("report needs --manifest PATH")
    new, bad = harness.replay(manifest, out, workers=args.threads)
    verdicts = dict(csv_reproduced=not bad)
    summary = dict(manifest=str(manifest), mismatched=bad, plan_digest=new.plan_digest, verdicts=verdicts)
    return _finish(out, "replay_summary.json", summary)


COMMANDS = dict(
    covariance=cmd_covariance,
    asymptotics=cmd_asymptotics,
    simulate=cmd_simulate,
    limit=cmd_limit,
    converge=cmd_converge,
    report=cmd_report,
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes for ensembles")
    common.add_argument("--out", default="eddylab_out", help="output directory")
    ap = argparse.ArgumentParser(prog="eddylab", description=__doc__.splitlines()[0], parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)
    helps = dict(
        covariance="covariance tables and structure identities of one noise",
        asymptotics="pair integrals, intensity scaling and annulus bracket along a ladder",
        simulate="integrate a batch of SPDE trajectories",
        limit="integrate the deterministic limit model",
        converge="full ensemble study along a ladder, with report",
        report="re-execute a run from its manifest and compare CSV bytes",
    )
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, parents=[common])
        if name == "report":
            p.add_argument("--manifest", help="manifest.json of the run to reproduce")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    code = COMMANDS[args.command](args, cfg, out)
    print(f"{args.command}: {time.perf_counter() - t0:.1f} s, output in {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
