import numpy as np
import pytest

from forchlab.estimates import (DiagnosticsSeries, EstimateConstants, boundary_functionals,
                                calibrate_pair_constants, difference_functionals, pair_functionals,
                                tail_limits, trajectory_functionals, verify_pair,
                                verify_single_solution, weighted_norm)
from forchlab.fields import Grid, build_medium, estimate_cp
from forchlab.solver import BoundaryExtension, SolverConfig, initial_field, simulate


def unit_medium(res=32, **kw):
    desc = {"preset": "homogeneous", "dim": 1, "resolution": [res], "alphas": [0, 1],
            "coeffs": [1, 1], "porosity": 1.0}
    desc.update(kw)
    return build_medium(desc)


def run(m, psi, p0="Psi + sin(pi*x)", dt=0.05, t_end=6.0):
    b = BoundaryExtension.from_expr(psi)
    return simulate(m, initial_field(p0, m.grid, b), b, SolverConfig(dt=dt, t_end=t_end))


def test_weighted_norm_examples():
    g = Grid(1, (200,))
    X, _ = g.centers()
    one = np.ones(g.shape)
    assert weighted_norm(one, one, 2) == pytest.approx(1.0)
    assert weighted_norm(2 * one, 0.5 * one, 2) == pytest.approx(np.sqrt(2))
    assert weighted_norm(np.sin(np.pi * X), one, 2) == pytest.approx(1 / np.sqrt(2), rel=1e-5)
    with pytest.raises(ValueError):
        weighted_norm(one, np.ones(3), 2)


def test_boundary_functional_examples():
    m = unit_medium()
    z = boundary_functionals(BoundaryExtension.zero(), m, [0.0, 2.0])
    assert np.all(z["G"] == m.weights.Bstar) and np.all(z["G1"] == 0) and np.all(z["G2"] == 0)
    g = boundary_functionals(BoundaryExtension.from_expr("x"), m, [0.0, 1.0])
    assert np.allclose(g["G"], 2.5)
    b = BoundaryExtension.from_expr("exp(-t)*x")
    assert np.all(difference_functionals(b, b, m, [0.0, 1.0])["D"] == 0)


def test_tail_limits_examples():
    t = np.linspace(0, 60, 3001)
    for G, A, B in [(np.full(t.size, 2.5), 2.5, 0.0), (1 + np.exp(-t), 1.0, 0.0),
                    (2 + np.sin(t), 3.0, 1.0)]:
        s = DiagnosticsSeries(times=t, G=G, G1=0 * t, G2=0 * t)
        tl = tail_limits(s)
        assert tl.A_hat == pytest.approx(A, abs=1e-3) and tl.B_hat == pytest.approx(B, abs=1e-3)
    with pytest.raises(ValueError):
        tail_limits(DiagnosticsSeries(times=t[:5], G=t[:5], G1=t[:5], G2=t[:5]))


def test_kappa0():
    assert EstimateConstants(0.5, 1.0).kappa0 == pytest.approx(5 / 6)
    c = EstimateConstants(0.5, 0.4)
    assert c.d1 == pytest.approx(2 ** -0.5) and c.d2 == pytest.approx(2 ** -0.5 * 0.4 ** -1.5)


def test_zero_data_series():
    m = unit_medium(16)
    s = trajectory_functionals(run(m, "0", p0="0", t_end=1.0))
    for name in ("pbar_L2phi_sq", "H_integral", "gradp_W1", "K_gradp_sq", "pbar_t_L2phi_sq"):
        assert np.all(getattr(s, name) == 0)
    assert np.all(s.G == m.weights.Bstar)


def test_heat_mode_series():
    m = build_medium({"preset": "homogeneous", "dim": 1, "resolution": [128], "alphas": [0],
                      "coeffs": [1], "porosity": 1.0, "linear_test_mode": True})
    b = BoundaryExtension.zero()
    tr = simulate(m, initial_field("sin(pi*x)", m.grid, b), b, SolverConfig(dt=1e-4, t_end=0.05))
    s = trajectory_functionals(tr)
    assert np.allclose(s.pbar_L2phi_sq, np.exp(-2 * np.pi ** 2 * s.times) / 2, rtol=1e-3)
    assert s.G is None and "gradp_W1" not in s.columns()


def test_single_solution_zero_boundary_data():
    m = unit_medium()
    tr = run(m, "0")
    s = trajectory_functionals(tr)
    c = EstimateConstants(m.weights.a, estimate_cp(m, rng=np.random.default_rng(0)).cp_used)
    sec = verify_single_solution(tr, s, c)
    assert sec.all_pass, [(v.name, v.status) for v in sec.entries if v.status != "PASS"]
    ex = sec["energy inequality, Bernoulli form, explicit constant (zero boundary data)"]
    assert ex.C_hat <= 1.0
    assert sec["L2 energy nonincreasing (zero boundary data)"].status == "PASS"


def test_single_solution_families_filter():
    m = unit_medium(16)
    tr = run(m, "exp(-t)*x", t_end=3.0)
    s = trajectory_functionals(tr)
    c = EstimateConstants(m.weights.a, 0.5)
    sec = verify_single_solution(tr, s, c, families=["l2"])
    assert sec.names() == ["L2 bound (i)", "L2 bound (ii)", "L2 bound (iii)"]
    with pytest.raises(ValueError):
        verify_single_solution(tr, s, c, families=["nope"])


def test_nonfinite_series_fail():
    m = unit_medium(16)
    tr = run(m, "0", t_end=2.0)
    s = trajectory_functionals(tr)
    s.H_integral = s.H_integral.copy()
    s.H_integral[5] = np.nan
    sec = verify_single_solution(tr, s, EstimateConstants(m.weights.a, 0.5))
    assert sec["H gradient bound (i)"].status == "FAIL"


def test_pair_identical_and_perturbed():
    m = unit_medium(16)
    A = run(m, "exp(-t)*x", t_end=4.0)
    B = run(m, "exp(-t)*x", t_end=4.0)
    Cc = run(m, "exp(-t)*x", p0="Psi + 2*sin(pi*x)", t_end=4.0)
    ps_same = pair_functionals(A, B)
    assert np.all(ps_same.Pbar_L2phi_sq == 0)
    sA = trajectory_functionals(A)
    assert np.allclose(ps_same.h1, m.weights.B1 + 2 * sA.H_integral)
    ps = pair_functionals(A, Cc)
    c = calibrate_pair_constants([ps], m.weights.a, 0.45)
    assert c.d3 > 0 and c.d4 > 0
    sec = verify_pair(A, B, ps_same, c)
    assert sec.all_pass and sec["identical data give identical solutions"].status == "PASS"
    sec = verify_pair(A, Cc, ps, c)
    assert sec["unforced pair decays"].status == "PASS"
    assert sec["Gronwall envelope with M1"].status == "PASS"


def test_pair_needs_common_times():
    m = unit_medium(16)
    with pytest.raises(ValueError):
        pair_functionals(run(m, "0", t_end=1.0), run(m, "0", t_end=2.0))
