import numpy as np
import pytest

from forchlab.odetoolkit import (PhiSpec, ScalarTrajectory, check_lemma_a1, check_lemma_a2,
                                 check_lemma_a3, check_lemma_a4, default_battery,
                                 gronwall_linear_envelope, integrate_ode, lemma_a2_constant)

T = np.linspace(0.0, 20.0, 2001)


def test_envelope_closed_forms():
    y0, M = 3.0, 2.0
    e = gronwall_linear_envelope(y0, 1.0, M, T).values
    assert np.allclose(e, y0 * np.exp(-T) + M * (1 - np.exp(-T)), atol=1e-5)
    h = 0.5 + 0.1 * np.sin(T)
    e = gronwall_linear_envelope(y0, h, 0.0, T).values
    H = np.concatenate([[0], np.cumsum(0.5 * (h[1:] + h[:-1]) * np.diff(T))])
    assert np.allclose(e, y0 * np.exp(-H), rtol=1e-6)
    e = gronwall_linear_envelope(y0, 0.0, np.cos(T), T).values
    assert np.allclose(e, y0 + np.sin(T), atol=1e-4)


def test_phi_inverses():
    z = np.linspace(0, 10, 101)
    for phi in (PhiSpec("identity"), PhiSpec("power", C0=2.0, a=0.5), PhiSpec("mixed", c=1.0, gamma=1.5)):
        assert np.allclose(phi.inverse(phi(z)), z, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        PhiSpec("mixed", gamma=2.5)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        ScalarTrajectory([0, 1, 1], [0, 0, 0])
    with pytest.raises(ValueError):
        ScalarTrajectory([0, 1], [0, -1])


def test_lemma_a1_examples():
    tr = integrate_ode(lambda t, y: -y + 2.0, 5.0, 40.0)
    v = check_lemma_a1(tr, 1.0, 2.0, PhiSpec("identity"))
    assert v.status == "PASS"
    tr = integrate_ode(lambda t, y: -np.sqrt(max(y[0], 0)) + 1.0, 4.0, 60.0)
    v = check_lemma_a1(tr, 1.0, 1.0, PhiSpec("power", C0=1.0, a=1.0))
    assert v.status == "PASS" and v.details["tail_max_y"] <= 1.0 + 1e-8


def test_lemma_a1_catches_a_violation():
    # y grows although the hypothesis asks for decay: checker must not PASS
    up = ScalarTrajectory(T, 1 + T)
    assert check_lemma_a1(up, 1.0, 0.0, PhiSpec("identity")).status != "PASS"


def test_lemma_a2_constant():
    assert lemma_a2_constant(1.0, 1.5) == 50331648.0


def test_lemma_a2_zero():
    z = ScalarTrajectory(T, np.zeros_like(T))
    assert check_lemma_a2(z, 0.0, PhiSpec("mixed", c=1.0, gamma=1.5)).status == "PASS"


def test_lemma_a3_examples():
    t = np.linspace(0, 60, 6001)
    tr = integrate_ode(lambda s, y: -y + 1.0, 3.0, 60.0, n=6001)
    g = 1 + 1 / (1 + t)
    assert check_lemma_a3(tr, 1.0, 1.0, g, gprime=-1 / (1 + t) ** 2).status == "PASS"


def test_lemma_a3_needs_infinite_integral():
    tr = integrate_ode(lambda s, y: -np.exp(-s) * y, 1.0, 60.0, n=6001)
    h = np.exp(-tr.times)
    assert check_lemma_a3(tr, h, 0.0, np.ones_like(h)).status == "INCONCLUSIVE"


def test_lemma_a4_examples():
    t = np.linspace(1.0, 50.0, 4901)
    v = check_lemma_a4(1 / t, t, fprime=-1 / t ** 2)
    # beta = tail sup of 1/t^2, zero in the limit
    assert v.status == "PASS" and v.details["beta"] == pytest.approx(0.0, abs=1e-3)
    t = np.linspace(0, 60, 6001)
    v = check_lemma_a4(2 + np.sin(t), t, fprime=np.cos(t))
    assert v.status == "PASS" and v.details["beta"] == pytest.approx(1.0, rel=0.05)


def test_lemma_a4_rejects_steep_drop():
    t = np.linspace(0, 10, 1001)
    f = np.where(t < 9, 10.0, 0.0)
    assert check_lemma_a4(f, t, fprime=np.zeros_like(t)).status == "FAIL"


def test_default_battery_all_pass():
    res = dict(default_battery())
    assert all(v.status == "PASS" for v in res.values()), {k: v.status for k, v in res.items()}
