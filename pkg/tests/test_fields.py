import numpy as np
import pytest

from forchlab.fields import (Grid, PRESETS, build_medium, cell_gradient, check_sdc,
                             estimate_cp_fields, face_gradients, poincare_ratio, sobolev_exponent)


def test_grid_geometry():
    g = Grid(2, (8, 4))
    assert g.shape == (8, 4) and g.h == (0.125, 0.25)
    assert g.cell_volume == pytest.approx(1 / 32) and g.measure == 1.0
    assert g.refined().resolution == (16, 8)
    with pytest.raises(ValueError):
        Grid(1, (2,))
    with pytest.raises(ValueError):
        Grid(3, (4, 4, 4))


def test_gradient_of_linear_field_is_exact():
    g = Grid(1, (16,))
    X, _ = g.centers()
    faces = [g.face_centers(0)[0]]
    grad = cell_gradient(3 * X, g, [3 * faces[0]])
    assert np.allclose(grad, 3.0)
    fg = face_gradients(3 * X, g, [3 * faces[0]])
    assert np.allclose(fg[0], 3.0)


def test_homogeneous_preset_is_constant():
    m = build_medium({"preset": "homogeneous", "dim": 2, "resolution": [6, 6], "alphas": [0, 1],
                      "coeffs": [1, 1]})
    assert np.all(m.porosity == 0.5)
    assert np.ptp(m.weights.W1_field) == 0


def test_layered_weights_take_two_values():
    m = build_medium({"preset": "layered", "dim": 1, "resolution": [8], "alphas": [0, 1],
                      "layer_coeffs": [[1, 1], [1, 4]], "layer_porosity": [0.5, 0.5]})
    assert sorted(np.unique(np.round(m.weights.W1_field, 12))) == [0.25, 0.5]


def test_raw_porosity_validation():
    phi = [0.5] * 7 + [1.5]
    with pytest.raises(ValueError, match=r"porosity must lie in \(0, 1\]"):
        build_medium({"preset": "raw", "dim": 1, "resolution": [8], "alphas": [0, 1],
                      "coeffs": [[1] * 8, [1] * 8], "porosity": phi})


@pytest.mark.parametrize("preset", [p for p in PRESETS if p != "raw"])
def test_presets_build_valid_media(preset):
    desc = {"preset": preset, "dim": 2, "resolution": [8, 8], "alphas": [0, 1], "coeffs": [1, 1]}
    if preset == "expression":
        desc.update(coeffs=["1 + x", "2 + sin(pi*y)"], porosity="0.2 + 0.5*x*y")
    m = build_medium(desc)
    assert np.all((m.porosity > 0) & (m.porosity <= 1))
    assert np.all(m.model.coeffs[0] > 0) and np.all(m.model.coeffs[-1] > 0)
    assert m.weights.Bstar >= 1


def test_degenerate_preset_reaches_floor():
    m = build_medium({"preset": "degenerate", "dim": 1, "resolution": [32], "alphas": [0, 1],
                      "coeffs": [1, 1], "phi_min": 1e-3})
    assert m.porosity.min() == pytest.approx(1e-3)


def test_seeded_presets_are_reproducible():
    d = {"preset": "random_layered", "dim": 1, "resolution": [16], "alphas": [0, 1], "seed": 7}
    a, b = build_medium(dict(d)), build_medium(dict(d))
    assert np.array_equal(a.model.coeffs, b.model.coeffs)
    assert np.array_equal(a.porosity, b.porosity)


def test_sdc_examples():
    assert check_sdc(1.0, 3)[0]
    assert not check_sdc(2.0, 4)[0]
    assert check_sdc(50.0, 2)[0]
    with pytest.raises(ValueError):
        check_sdc(1.0, 1)


def test_sobolev_exponent():
    assert sobolev_exponent(1.5, 1) == np.inf
    assert sobolev_exponent(1.5, 2) == pytest.approx(6.0)
    assert sobolev_exponent(2.5, 2) == np.inf


def test_poincare_constant_unit_interval():
    g = Grid(1, (256,))
    one = np.ones(g.shape)
    est = estimate_cp_fields(g, one, one, 0.0, rng=np.random.default_rng(0))
    assert est.cp_empirical == pytest.approx(1 / np.pi, rel=0.02)
    assert est.cp_used == pytest.approx(1.1 * est.cp_empirical)


def test_poincare_ratio_guards_zero_and_scales():
    g = Grid(1, (64,))
    one = np.ones(g.shape)
    assert np.isnan(poincare_ratio(np.zeros(g.shape), g, one, one, 0.5))
    X, _ = g.centers()
    u = np.sin(np.pi * X)
    assert poincare_ratio(2 * u, g, one, one, 0.0) == pytest.approx(poincare_ratio(u, g, one, one, 0.0))
