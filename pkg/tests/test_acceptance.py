"""Acceptance suite: one test and one printed pass/fail line per criterion.

Run on its own with ``pytest tests/test_acceptance.py -s`` to see the lines
as they are produced; they are also collected in the terminal summary.
"""
import json
import os
import time

import numpy as np
import pytest

from forchlab.cli import main, run
from forchlab.config import loads
from forchlab.constitutive import (ForchheimerModel, eval_H, eval_K, g_values, make_sampling_plan,
                                   solve_s_coeffs, verify_pointwise_bounds)
from forchlab.estimates import (EstimateConstants, trajectory_functionals, verify_single_solution)
from forchlab.fields import PRESETS, build_medium, estimate_cp
from forchlab.odetoolkit import default_battery, lemma_a2_constant
from forchlab.solver import BoundaryExtension, SolverConfig, initial_field, mms_convergence, simulate

TWO = ForchheimerModel.homogeneous([0, 1], [1, 1])


def preset_desc(preset, dim, res):
    desc = {"preset": preset, "dim": dim, "resolution": [res] * dim, "alphas": [0, 1],
            "coeffs": [1, 1], "seed": 3}
    if preset == "expression":
        desc.update(coeffs=["1 + x", "2 + sin(pi*x)"], porosity="0.2 + 0.6*x")
    elif preset == "layered":
        desc.update(layer_coeffs=[[1, 1], [2, 4], [0.5, 2]], layer_porosity=[0.3, 0.8, 0.5])
    elif preset == "raw":
        rng = np.random.default_rng(11)
        shape = (res,) * dim
        desc.update(porosity=rng.uniform(0.2, 1.0, shape).tolist(),
                    coeffs=[rng.uniform(0.5, 2, shape).tolist(), rng.uniform(0.5, 2, shape).tolist()])
    return desc


def solve(medium, psi, p0, dt, t_end):
    b = BoundaryExtension.from_expr(psi)
    return simulate(medium, initial_field(p0, medium.grid, b), b, SolverConfig(dt=dt, t_end=t_end))


def constants_for(medium, seed=0):
    est = estimate_cp(medium, rng=np.random.default_rng(seed), safety_factor=1.1)
    return EstimateConstants(medium.weights.a, est.cp_used)


def report_entries(out):
    rep = json.load(open(os.path.join(out, "report.json")))
    return {e["name"]: e for s in rep["sections"] for e in s["entries"]}


def test_01_constitutive_round_trip(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        N = int(rng.integers(1, 5))
        alphas = np.concatenate([[0.0], np.sort(rng.uniform(0.05, 3.0, N))])
        coeffs = np.stack([rng.uniform(0.1, 5.0, 100) for _ in range(N + 1)])
        if N > 1:
            coeffs[1:-1] *= rng.random((N - 1, 100)) < 0.7   # interior terms may vanish
        s = 10.0 ** rng.uniform(-8, 6, 100)
        s[:3] = 0.0
        xi = s * g_values(coeffs, alphas, s)
        back = solve_s_coeffs(coeffs, alphas, xi)
        worst = max(worst, float(np.max(np.abs(back - s) / np.maximum(s, 1e-12))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 5.0
    criterion(1, "constitutive round trip", ok, f"max rel err {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_02_pointwise_battery(criterion):
    start = time.perf_counter()
    failed = []
    for preset in PRESETS:
        for alphas in ([0, 1], [0, 0.5, 2.0]):
            desc = preset_desc(preset, 2, 16)
            if len(alphas) == 3:
                if preset in ("raw", "layered", "expression", "singular"):
                    continue
                desc.update(alphas=alphas, coeffs=[1, 0.5, 2])
            m = build_medium(desc)
            plan = make_sampling_plan(m.model, 10_000, np.random.default_rng(7), dim=2)
            sec = verify_pointwise_bounds(m.model, plan, slack=1e-8)
            failed += [(preset, v.name) for v in sec.entries if v.status != "PASS"]
    elapsed = time.perf_counter() - start
    ok = not failed and elapsed < 30.0
    criterion(2, "pointwise inequality battery", ok, f"{elapsed:.1f} s, failures {failed}")
    assert ok


def test_03_closed_form_oracles(criterion):
    H = float(eval_H(TWO, None, 1.0))
    _, dK = eval_K(TWO, None, 6.0)
    h_ok = abs(H - 0.7548562) <= 1e-8
    k_ok = abs(float(dK) + 1.0 / 45.0) <= 1e-10
    criterion(3, "closed-form oracles", h_ok and k_ok,
              f"H(1) = {H:.10f} vs 0.7548562 ({'ok' if h_ok else 'off'}), "
              f"dK/dxi(6) = {float(dK):.12f} ({'ok' if k_ok else 'off'})")
    assert k_ok
    assert h_ok, f"H(1) = {H!r}"


def test_04_solver_validation(criterion):
    start = time.perf_counter()
    heat = {"preset": "homogeneous", "dim": 1, "alphas": [0], "coeffs": [1], "porosity": 1.0,
            "linear_test_mode": True}
    exact = "exp(-pi^2*t)*sin(pi*x)"
    ht = mms_convergence(heat, None, [256], [0.01, 0.005, 0.0025], 0.1, exact=exact)
    res = [64, 128, 256]
    hs = mms_convergence(heat, None, res, [0.25 / r ** 2 for r in res], 0.02, exact=exact)
    two = {"preset": "homogeneous", "dim": 1, "alphas": [0, 1], "coeffs": [1, 1], "porosity": 1.0}
    mt = mms_convergence(two, "exp(-t)*cos(pi*x)", [256], [0.05, 0.025, 0.0125], 0.5)
    elapsed = time.perf_counter() - start
    orders = (ht.min_order(), hs.min_order(), mt.min_order())
    ok = orders[0] >= 0.9 and orders[1] >= 1.8 and orders[2] >= 0.9 and elapsed < 120
    criterion(4, "solver validation", ok,
              f"heat time {orders[0]:.3f}, heat space {orders[1]:.3f}, MMS time {orders[2]:.3f}, "
              f"{elapsed:.1f} s")
    assert ok


def test_05_explicit_energy_chain(criterion):
    names = ("energy inequality, Bernoulli form, explicit constant (zero boundary data)",
             "L2 energy nonincreasing (zero boundary data)", "two-weight inequality on pbar")
    failed = []
    worst = 0.0
    for preset in PRESETS:
        for dim, res, p0 in ((1, 32, "sin(pi*x)"), (2, 12, "4*sin(pi*x)*sin(pi*y)")):
            m = build_medium(preset_desc(preset, dim, res))
            tr = solve(m, "0", p0, 0.05, 4.0)
            series = trajectory_functionals(tr)
            sec = verify_single_solution(tr, series, constants_for(m), families=["energy", "monitor"])
            for n in names:
                if sec[n].status != "PASS":
                    failed.append((preset, dim, n))
            worst = max(worst, sec[names[0]].C_hat / sec[names[0]].details["explicit_bound"])
    ok = not failed
    criterion(5, "explicit-constant energy chain, zero boundary data", ok,
              f"max C_hat/(B1/B*) {worst:.3g}, failures {failed}")
    assert ok


STANDARD = [
    ("homogeneous", 1, 32, "exp(-t)*x"),
    ("homogeneous", 1, 32, "(2+sin(t))*x"),
    ("layered", 1, 32, "(2+sin(t))*x"),
    ("checkerboard", 2, 8, "exp(-t)*x"),
]


def test_06_generic_constant_stability(criterion):
    bad = []
    growth = 0.0
    for preset, dim, res, psi in STANDARD:
        desc = preset_desc(preset, dim, res)
        p0 = "Psi + sin(pi*x)" if dim == 1 else "Psi + sin(pi*x)*sin(pi*y)"
        m = build_medium(desc)
        tr = solve(m, psi, p0, 0.05, 8.0)
        mf = build_medium(dict(desc, resolution=[2 * res] * dim))
        trf = solve(mf, psi, p0, 0.025, 8.0)
        sec = verify_single_solution(tr, trajectory_functionals(tr), constants_for(m),
                                     refined=(trf, trajectory_functionals(trf)),
                                     families=["l2", "gradient", "time_derivative"])
        for v in sec.entries:
            if v.status != "PASS":
                bad.append((preset, psi, v.name, v.refinement and round(v.refinement["ratio"], 3)))
            elif v.refinement["C_hat_coarse"] > 1e-6:
                growth = max(growth, v.refinement["ratio"])
    ok = not bad
    criterion(6, "generic-constant stability under refinement", ok,
              f"max C_fine/C_coarse {growth:.3f}, failures {bad}")
    assert ok


PAIR_BASE = """
seed = 1
[boundary]
Psi = "exp(-t)*x"
[solver]
dt = 0.05
t_end = 6.0
"""


def test_07_continuous_dependence(criterion, tmp_path):
    same = str(tmp_path / "same")
    run("pair", loads(PAIR_BASE), same)
    e_same = report_entries(same)
    ident = e_same["identical data give identical solutions"]
    pert = str(tmp_path / "pert")
    run("pair", loads(PAIR_BASE + '\n[pair]\ninitial = {p0 = "Psi + 2*sin(pi*x)"}\n'), pert)
    e = report_entries(pert)
    lay = str(tmp_path / "layered")
    run("pair", loads(PAIR_BASE + '\n[medium]\npreset = "checkerboard"\ndim = 2\nresolution = [10, 10]\n'
                      '\n[pair]\ninitial = {p0 = "Psi + 0.5*sin(pi*x)*sin(pi*y)"}\n'), lay)
    e2 = report_entries(lay)
    envs = [v for d in (e_same, e, e2) for k, v in d.items() if k.startswith("Gronwall envelope")]
    ok = (ident["status"] == "PASS" and ident["details"]["max_norm"] <= 1e-12
          and e["unforced pair decays"]["status"] == "PASS"
          and e2["unforced pair decays"]["status"] == "PASS"
          and len(envs) >= 6 and all(v["status"] == "PASS" for v in envs))
    criterion(7, "continuous dependence", ok,
              f"identical max norm {ident['details']['max_norm']:.1e}, "
              f"{sum(v['status'] == 'PASS' for v in envs)}/{len(envs)} envelopes dominate")
    assert ok


TAIL = """
seed = 2
[boundary]
Psi = "{psi}"
[solver]
dt = 0.1
t_end = 64.0
"""

TAIL_FORMS = ("L2 bound (ii)", "L2 bound (iii)", "H gradient bound (ii)", "H gradient bound, t >= 1 (ii)",
              "H gradient bound, t >= 1 (iii)", "W1 gradient bound (iii)", "W1 gradient bound (iv)",
              "p_t bound (iii)", "p_t bound (iii), pointwise data", "p_t bound (iv)")
KAPPA_FORMS = ("continuous dependence, large time", "gradient continuous dependence, large time")


def test_08_tail_suite(criterion, tmp_path):
    failed = []
    for k, (psi, other) in enumerate((("exp(-t)*x", "0"), ("(2+sin(t))*x", "2*x"))):
        text = TAIL.format(psi=psi)
        out = str(tmp_path / f"v{k}")
        run("verify", loads(text), out)
        e = report_entries(out)
        failed += [(psi, n) for n in TAIL_FORMS if e[n]["status"] != "PASS"]
        out = str(tmp_path / f"p{k}")
        run("pair", loads(text + f'\n[pair]\nboundary = {{Psi = "{other}"}}\n'), out)
        e = report_entries(out)
        failed += [(psi, n) for n in KAPPA_FORMS if e[n]["status"] != "PASS"]
        kappa = e["calibrated constants"]["details"]["kappa0"]
        if abs(kappa - 5 / 6) > 1e-15:
            failed.append((psi, f"kappa0 = {kappa}"))
    ok = not failed
    criterion(8, "tail and limsup suite", ok, f"kappa0 = 5/6, failures {failed}")
    assert ok


def test_09_ode_lemma_battery(criterion):
    results = dict(default_battery())
    bad = [k for k, v in results.items() if v.status != "PASS"]
    C = lemma_a2_constant(1.0, 1.5)
    beta = results["a4-oscillating"].details["beta"]
    c_ok = C == 50331648.0 and results["a2-oscillating"].C_hat == C
    ok = not bad and c_ok and abs(beta - 1.0) <= 0.05
    criterion(9, "ODE lemma battery", ok, f"C = {C:.0f}, beta = {beta:.4f}, failures {bad}")
    assert ok


DET = """
seed = 9
[medium]
preset = "random_layered"
dim = 2
resolution = [8, 8]
[boundary]
Psi = "exp(-t)*x"
[solver]
dt = 0.1
t_end = 3.0
"""


def test_10_determinism_and_exit_status(criterion, tmp_path):
    cfgfile = tmp_path / "det.toml"
    cfgfile.write_text(DET)
    outs = [str(tmp_path / f"r{i}") for i in range(2)]
    codes = [main(["verify", "--config", str(cfgfile), "--out", o]) for o in outs]
    same = all(open(os.path.join(outs[0], f), "rb").read() == open(os.path.join(outs[1], f), "rb").read()
               for f in ("diagnostics.csv", "report.json", "trajectory.bin", "trajectory.json"))
    failfile = tmp_path / "fail.toml"
    failfile.write_text(DET + "picard_max = 1\npicard_tol = 1e-15\n")
    fail_out = str(tmp_path / "fail")
    fail_code = main(["verify", "--config", str(failfile), "--out", fail_out])
    fails = [v for v in report_entries(fail_out).values() if v["status"] == "FAIL"]
    badfile = tmp_path / "bad.toml"
    badfile.write_text("[medium]\nporosity = 1.5\n")
    bad_code = main(["verify", "--config", str(badfile), "--out", str(tmp_path / "bad")])
    ok = (codes == [0, 0] and same and fail_code == 1 and bad_code == 2 and fails
          and fails[0]["first_violation_time"] is not None and fails[0]["anchor"])
    criterion(10, "determinism and exit status", ok,
              f"exit codes {codes + [fail_code, bad_code]}, byte-identical {same}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
