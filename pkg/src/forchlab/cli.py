"""Command line: ``forchlab <simulate|verify|pair|odecheck|sweep|report>``.

Exit status is 0 iff the produced report carries no FAIL verdict; 2 on a
configuration or I/O error.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import itertools
import os
import sys
import time

import numpy as np

from . import __version__
from .config import ConfigError, dumps, parse_config, write_config
from .constitutive import make_sampling_plan, verify_pointwise_bounds
from .estimates import (EstimateConstants, calibrate_pair_constants, pair_functionals,
                        trajectory_functionals, verify_pair, verify_single_solution)
from .expr import compile_expr
from .fields import EstimateError, build_medium, check_sdc, estimate_cp
from .io import (atomic_write, ensure_writable, read_checkpoint, read_report, write_checkpoint,
                 write_outputs)
from .odetoolkit import default_battery
from .report import Section, VerificationReport, Verdict, digest
from .solver import BoundaryExtension, SolverConfig, StepError, Trajectory, initial_field, simulate

COMMANDS = ("simulate", "verify", "pair", "odecheck", "sweep", "report")


# ----------------------------------------------------------------- building blocks


def boundary_from(sec):
    b = BoundaryExtension.from_expr(sec["Psi"])
    if sec.get("Psi_t") is not None:
        b.Psi_t = compile_expr(sec["Psi_t"])
    if sec.get("Psi_tt") is not None:
        b.Psi_tt = compile_expr(sec["Psi_tt"])
    return b


def solver_config(cfg):
    s = cfg.solver
    return SolverConfig(dt=float(s["dt"]), t_end=float(s["t_end"]), picard_tol=float(s["picard_tol"]),
                        picard_max=int(s["picard_max"]), stride=int(s["stride"]))


def refined(cfg):
    """Same run with ``h`` and ``dt`` halved."""
    c = cfg.with_override("medium.resolution", [2 * r for r in cfg.medium["resolution"]])
    return c.with_override("solver.dt", cfg.solver["dt"] / 2)


def run_solution(cfg, boundary=None, p0=None, medium=None):
    medium = build_medium(cfg.medium_description()) if medium is None else medium
    b = boundary_from(cfg.boundary) if boundary is None else boundary
    init = initial_field(cfg.initial["p0"] if p0 is None else p0, medium.grid, b)
    return simulate(medium, init, b, solver_config(cfg))


def load_trajectory(cfg, path):
    medium = build_medium(cfg.medium_description())
    times, p, side = read_checkpoint(path)
    if side["grid"] != medium.grid.to_dict():
        raise ConfigError(f"checkpoint grid {side['grid']} does not match the configured medium",
                          field="verify.checkpoint")
    return Trajectory(medium, boundary_from(cfg.boundary), solver_config(cfg), times, p)


def solver_section(traj=None, error=None):
    sec = Section("solver")
    if error is not None:
        sec.add(Verdict("implicit step convergence", "Picard iteration per backward Euler step",
                        "FAIL", first_violation_time=error.t, details={"error": str(error)}))
        return sec
    its = [e["iterations"] for e in traj.log] or [0]
    sec.add(Verdict("implicit step convergence", "Picard iteration per backward Euler step", "PASS",
                    details={"steps": len(traj.log), "max_iterations": int(max(its)),
                             "mean_iterations": float(np.mean(its))}))
    return sec


def poincare_section(medium, cfg, rng):
    sec = Section("two-weight inequality")
    w = medium.weights
    n = medium.grid.dim
    if n == 1:
        # H^1 embeds in L^inf on an interval: no restriction on the degree
        holds, margin = True, float("inf")
    else:
        holds, margin = check_sdc(medium.model, n)
    sec.add(Verdict("strict degree condition", "deg(g) < 4/(n-2)", "PASS" if holds else "FAIL",
                    margin=margin, details={"n": n, "a": w.a}))
    if not holds:
        return sec, None
    try:
        est = estimate_cp(medium, rng=rng, safety_factor=cfg.verify["cp_safety"])
    except EstimateError as exc:
        sec.add(Verdict("Poincare constant", "c_P estimate", "FAIL", details={"error": str(exc)}))
        return sec, None
    sec.add(Verdict("Poincare constant", "||u||_(L2_phi) <= c_P ||grad u||_(L^(2-a)_W1)", "PASS",
                    margin=est.cp_used - est.cp_empirical, details=est.to_dict()))
    return sec, est


def _meta(cfg, command):
    return {"command": command, "config_sha256": cfg.digest(), "seed": cfg.seed,
            "version": __version__}


# ----------------------------------------------------------------- commands


def cmd_simulate(cfg, out):
    report = VerificationReport(meta=_meta(cfg, "simulate"))
    try:
        traj = run_solution(cfg)
    except StepError as exc:
        report.add(solver_section(error=exc))
        return report, None, {}
    report.add(solver_section(traj))
    series = trajectory_functionals(traj)
    files = list(write_checkpoint(traj, out))
    return report, series, {"files": files, "wall_time_solver": traj.wall_time}


def cmd_verify(cfg, out, refine=False):
    report = VerificationReport(meta=_meta(cfg, "verify"))
    rng = np.random.default_rng(cfg.seed)
    extra = {}
    try:
        if cfg.verify["checkpoint"]:
            traj = load_trajectory(cfg, cfg.verify["checkpoint"])
        else:
            traj = run_solution(cfg)
            extra["files"] = list(write_checkpoint(traj, out))
    except StepError as exc:
        report.add(solver_section(error=exc))
        return report, None, extra
    medium = traj.medium
    report.add(solver_section(traj))
    series = trajectory_functionals(traj)
    if medium.model.linear_test_mode:
        return report, series, extra
    plan = make_sampling_plan(medium.model, int(cfg.verify["pointwise_samples"]), rng,
                              dim=medium.grid.dim)
    report.add(verify_pointwise_bounds(medium.model, plan))
    sec, est = poincare_section(medium, cfg, rng)
    report.add(sec)
    if est is None:
        return report, series, extra
    constants = EstimateConstants(medium.weights.a, est.cp_used)
    fine = None
    if refine or cfg.verify["refine"]:
        try:
            ftraj = run_solution(refined(cfg))
        except StepError as exc:
            report.add(solver_section(error=exc))
            return report, series, extra
        fine = (ftraj, trajectory_functionals(ftraj))
    v = cfg.verify
    report.add(verify_single_solution(traj, series, constants, refined=fine, window=v["tail_window"],
                                      t0=v["t0"], T=v["T"], families=v["families"]))
    return report, series, extra


def _other(cfg):
    pair = cfg.pair or {}
    b = dict(cfg.boundary)
    if pair.get("boundary"):
        b = dict(pair["boundary"])
    p0 = cfg.initial["p0"]
    if pair.get("initial"):
        p0 = pair["initial"]["p0"]
    return b, p0


def default_calibration(dim):
    bump = "sin(pi*x)" if dim == 1 else "sin(pi*x)*sin(pi*y)"
    return [f"Psi + 0.5*{bump}", f"Psi + 2*{bump}"]


def cmd_pair(cfg, out, refine=False):
    report = VerificationReport(meta=_meta(cfg, "pair"))
    rng = np.random.default_rng(cfg.seed)
    medium = build_medium(cfg.medium_description())
    if medium.model.linear_test_mode:
        raise ConfigError("pair verification needs a Forchheimer model", field="model.linear_test_mode")
    bsec, p0B = _other(cfg)
    bA = boundary_from(cfg.boundary)
    bB = boundary_from(bsec)
    try:
        A = run_solution(cfg, bA, medium=medium)
        B = run_solution(cfg, bB, p0B, medium=medium)
        calib_inits = (cfg.pair or {}).get("calibration") or default_calibration(medium.grid.dim)
        calib = [run_solution(cfg, bA, p, medium=medium) for p in calib_inits]
    except StepError as exc:
        report.add(solver_section(error=exc))
        return report, None, {}
    report.add(solver_section(A))
    sec, est = poincare_section(medium, cfg, rng)
    report.add(sec)
    if est is None:
        return report, None, {}
    sA, sB = trajectory_functionals(A), trajectory_functionals(B)
    pairs = [pair_functionals(A, c, sA) for c in calib]
    if bA.source == bB.source:
        pairs.append(pair_functionals(A, B, sA, sB))
    constants = calibrate_pair_constants(pairs, medium.weights.a, est.cp_used)
    ps = pair_functionals(A, B, sA, sB)
    v = cfg.verify
    section = verify_pair(A, B, ps, constants, window=v["tail_window"], t0=v["t0"],
                          unbounded=bool((cfg.pair or {}).get("unbounded")))
    report.add(section)
    cal = Section("calibration")
    for i, (p, c) in enumerate(zip(calib_inits, pairs)):
        sub = verify_pair(A, calib[i], c, constants, window=v["tail_window"], t0=v["t0"])
        env = sub["Gronwall envelope with M1"]
        env.name = f"Gronwall envelope with M1, calibration pair {i}"
        env.details["initial"] = p
        cal.add(env)
    cal.add(Verdict("calibrated constants", "d3, d4 by halving and bisection", "PASS",
                    details=constants.to_dict()))
    report.add(cal)
    files = list(write_checkpoint(A, out, "trajectory_a")) + list(write_checkpoint(B, out, "trajectory_b"))
    write_outputs(out, series=sA, csv_name="diagnostics_a.csv")
    write_outputs(out, series=sB, csv_name="diagnostics_b.csv")
    files += ["diagnostics_a.csv", "diagnostics_b.csv"]
    return report, ps, {"files": files}


def cmd_odecheck(cfg, out):
    report = VerificationReport(meta=_meta(cfg, "odecheck"))
    sec = Section("ODE lemmas")
    names = cfg.odecheck.get("names")
    for name, verdict in default_battery():
        if names and name not in names:
            continue
        verdict.name = f"{name}: {verdict.name}" if verdict.name != name else name
        sec.add(verdict)
    report.add(sec)
    return report, None, {}


def _sweep_points(cfg):
    params = cfg.sweep["parameters"]
    keys = sorted(params)
    return keys, list(itertools.product(*(params[k] for k in keys)))


def _sweep_one(args):
    text, out, command, refine = args
    from .config import loads
    cfg = loads(text)
    ensure_writable(out)
    code = run(command, cfg, out, refine=refine)
    summary = read_report(os.path.join(out, "report.json")).counts()
    return {"out": out, "exit_code": code, "counts": summary}


def cmd_sweep(cfg, out, refine=False):
    if not cfg.sweep:
        raise ConfigError("sweep needs a [sweep] section", field="sweep")
    keys, points = _sweep_points(cfg)
    jobs = []
    for i, vals in enumerate(points):
        c = cfg.replace(sweep={})
        for k, v in zip(keys, vals):
            c = c.with_override(k, v)
        sub = os.path.join(out, f"run_{i:03d}")
        ensure_writable(sub)
        write_config(c, os.path.join(sub, "config.toml"))
        jobs.append((dumps(c), sub, cfg.sweep["command"], refine))
    workers = max(1, min(int(os.environ.get("FORCHLAB_WORKERS", os.cpu_count() or 1)), len(jobs)))
    if workers == 1:
        results = [_sweep_one(j) for j in jobs]
    else:
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    report = VerificationReport(meta=_meta(cfg, "sweep"))
    sec = Section("sweep")
    for vals, res in zip(points, results):
        label = ", ".join(f"{k}={v}" for k, v in zip(keys, vals))
        st = "PASS" if res["exit_code"] == 0 else "FAIL"
        sec.add(Verdict(f"run {os.path.basename(res['out'])}", label, st,
                        details={"counts": res["counts"], "parameters": dict(zip(keys, vals))}))
    report.add(sec)
    rows = {"run": np.arange(len(points), dtype=float),
            "exit_code": np.array([r["exit_code"] for r in results], float),
            "n_fail": np.array([r["counts"].get("FAIL", 0) for r in results], float)}
    return report, rows, {"workers": workers}


def cmd_report(cfg, out, source=None):
    path = source or os.path.join(out, "report.json")
    report = read_report(path)
    text = digest(report)
    atomic_write(os.path.join(out, "digest.txt"), text)
    print(text)
    return report


# ----------------------------------------------------------------- entry points


def run(command, cfg, out, refine=False, source=None):
    """Execute ``command``; writes outputs under ``out`` and returns the exit status."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; choose from {COMMANDS}")
    ensure_writable(out)
    start = time.time()
    t0 = time.perf_counter()
    if command == "report":
        return cmd_report(cfg, out, source).exit_code()
    csv_name = "diagnostics.csv"
    if command == "simulate":
        report, series, extra = cmd_simulate(cfg, out)
    elif command == "verify":
        report, series, extra = cmd_verify(cfg, out, refine)
    elif command == "pair":
        report, series, extra = cmd_pair(cfg, out, refine)
        csv_name = "diagnostics_pair.csv"
    elif command == "odecheck":
        report, series, extra = cmd_odecheck(cfg, out)
    else:
        report, series, extra = cmd_sweep(cfg, out, refine)
        csv_name = "summary.csv"
    write_config(cfg, os.path.join(out, "config.toml"))
    files = extra.pop("files", [])
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "code_version": __version__,
        "timing": {"started": start, "wall_seconds": time.perf_counter() - t0},
        "inventory": [{"path": os.path.basename(f)} for f in files] + [{"path": "config.toml"}],
        "counts": report.counts(),
        "exit_code": report.exit_code(),
        "extra": extra,
    }
    write_outputs(out, series=series, report=report, manifest=manifest, csv_name=csv_name)
    return report.exit_code()


def build_parser():
    ap = argparse.ArgumentParser(prog="forchlab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="TOML run configuration")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--resolution", type=int, help="cells per axis")
    ap.add_argument("--tol", type=float, help="Picard tolerance")
    ap.add_argument("--refine", action="store_true", help="check constants under (h, dt) halving")
    ap.add_argument("--input", help="report JSON for the report command")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            from .config import from_dict
            cfg = parse_config(args.config) if args.config else from_dict({})
            return run("report", cfg, args.out, source=args.input)
        if not args.config:
            raise ConfigError("--config is required for this command")
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_override("seed", args.seed)
        if args.resolution is not None:
            cfg = cfg.with_override("medium.resolution", [args.resolution] * cfg.medium["dim"])
        if args.tol is not None:
            cfg = cfg.with_override("solver.picard_tol", args.tol)
        return run(args.command, cfg, args.out, refine=args.refine)
    except ConfigError as exc:
        where = f" (line {exc.line}, column {exc.column})" if exc.line else ""
        print(f"forchlab: configuration error{where}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"forchlab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
