import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2a.errors import ClassOutOfRange, DegenerateModel, NonFiniteValue, ZeroGradient
from e2a.gnn import ModelConfig, init_model
from e2a.landscape import (
    binary_energy_of_margin,
    diagnostic_rows,
    directional_lipschitz,
    energy,
    lipschitz_probe,
    margin,
    margin_radius,
    multiclass_energy_bounds,
    oracle_radius,
    param_loss_increase,
    radius_distribution,
    sam_sharpness,
)
from e2a import autodiff as ad
from e2a.properties import affine_head, check_affine_radius, check_binary_monotone, check_energy_sandwich
from e2a.syngraph import make_motif_dataset

# S = (3 h0 + 4 h1, 0)
AFFINE = affine_head(np.array([[3.0, 0.0], [4.0, 0.0]]), np.zeros(2))
CONSTANT = affine_head(np.zeros((2, 2)), np.array([1.0, 0.0]))


@pytest.fixture(scope="module")
def small():
    return make_motif_dataset(shift="basis", seed=7, counts=50)


def test_energy_examples():
    assert energy([0.0, 0.0]) == pytest.approx(-math.log(2), abs=1e-15)
    assert energy([10.0, 10.0, 10.0]) == pytest.approx(-10 - math.log(3), abs=1e-12)
    g = 1.7
    assert energy([g / 2, -g / 2]) == pytest.approx(-math.log(2 * math.cosh(g / 2)), abs=1e-12)
    np.testing.assert_allclose(energy(np.zeros((4, 2))), np.full(4, -math.log(2)))


def test_energy_rejects_non_finite():
    with pytest.raises(NonFiniteValue):
        energy([0.0, np.inf])


@settings(max_examples=200)
@given(
    S=st.lists(st.floats(-300, 300), min_size=2, max_size=10),
    c=st.floats(-100, 100),
)
def test_energy_translation(S, c):
    S = np.array(S)
    assert energy(S + c) == pytest.approx(energy(S) - c, abs=1e-9)


def test_margin_examples():
    assert margin([2.0, 1.0, 0.0], 0) == 1.0
    assert margin([1.0, 1.0, 0.0], 0) == 0.0
    assert margin([0.0, 3.0, 0.0], 0) == -3.0
    with pytest.raises(ClassOutOfRange):
        margin([0.0, 1.0], 2)


def test_margin_radius_affine_hand_value():
    r = margin_radius([1.0, 1.0], 0, AFFINE)
    assert r.method == "margin_approx"
    assert r.value == pytest.approx(1.4, abs=1e-12)


def test_margin_radius_misclassified_is_zero():
    assert margin_radius([-1.0, -1.0], 0, AFFINE).value == 0.0


def test_margin_radius_zero_gradient():
    with pytest.raises(ZeroGradient):
        margin_radius([1.0, 1.0], 0, CONSTANT)


def test_oracle_affine():
    r = oracle_radius([1.0, 1.0], 0, AFFINE)
    assert r.converged and r.method == "oracle_bisection"
    assert abs(r.value - 7 / 5) <= 1e-4


def test_oracle_misclassified_is_zero():
    r = oracle_radius([-1.0, -1.0], 0, AFFINE)
    assert r.value == 0.0 and r.converged


def test_oracle_constant_classifier():
    r = oracle_radius([1.0, 1.0], 0, CONSTANT, r_max=10.0)
    assert not r.converged and r.value == 10.0


def test_oracle_never_below_true_radius_affine():
    rng = np.random.default_rng(5)
    for _ in range(20):
        W, b, H = rng.standard_normal((4, 2)), rng.standard_normal(2), rng.standard_normal(4)
        S = H @ W + b
        y = int(np.argmax(S))
        closed = abs(S[0] - S[1]) / np.linalg.norm(W[:, 0] - W[:, 1])
        r = oracle_radius(H, y, affine_head(W, b), r_max=100.0)
        assert closed - 1e-9 <= r.value <= closed + 1e-4


def test_binary_energy_examples():
    assert binary_energy_of_margin(0.0) == pytest.approx(-math.log(2), abs=1e-15)
    assert binary_energy_of_margin(2.0) == pytest.approx(-math.log(2 * math.cosh(1.0)), abs=1e-12)
    assert binary_energy_of_margin(2.0) == pytest.approx(-1.1269, abs=1e-4)
    assert binary_energy_of_margin(4.0) < binary_energy_of_margin(2.0) < binary_energy_of_margin(0.0)
    assert binary_energy_of_margin(1400.0) == pytest.approx(-700.0)


def test_binary_energy_monotone_on_fine_grid():
    gammas = np.arange(0.0, 20.0 + 1e-9, 0.1)
    e = np.array([binary_energy_of_margin(g) for g in gammas])
    assert np.all(np.diff(e) < 0)
    assert check_binary_monotone().passed


def test_bounds_examples():
    r = multiclass_energy_bounds([5.0, 0.0, 0.0])
    assert (r.L, r.gamma, r.C) == (5.0, 5.0, 3)
    assert r.upper == -5.0
    assert r.lower == pytest.approx(-5 - math.log(1 + 2 * math.exp(-5)), abs=1e-15)
    # tied non-max logits attain the lower bound
    assert r.energy == pytest.approx(r.lower, abs=1e-9)
    far = multiclass_energy_bounds([200.0, 0.0, -1.0])
    assert far.energy == pytest.approx(-200.0, abs=1e-12)


@settings(max_examples=300)
@given(S=st.lists(st.floats(-50, 50), min_size=2, max_size=10))
def test_sandwich_property(S):
    assert multiclass_energy_bounds(S).holds


def test_sandwich_bulk():
    assert check_energy_sandwich(n=2000, seed=1).passed


def test_affine_exactness_bulk():
    assert check_affine_radius(n=30, seed=3).passed


def test_argmax_invariant_under_scale_and_shift():
    rng = np.random.default_rng(0)
    S = rng.standard_normal((100, 4))
    for lam, c in ((0.3, 0.0), (7.0, -2.0), (1.0, 50.0)):
        np.testing.assert_array_equal(np.argmax(lam * S + c, axis=1), np.argmax(S, axis=1))


def test_directional_lipschitz_affine():
    W = np.random.default_rng(1).standard_normal((5, 3))
    est = directional_lipschitz(lambda p: ad.matmul(p["x"], W), {"x": np.ones((1, 5))}, n_samples=16)
    assert est == pytest.approx(np.linalg.norm(W, 2), rel=0.05)


def test_lipschitz_probe_scaling(small):
    theta, phi = init_model(4, 3, ModelConfig(), 2)
    g = small["train"][0]
    base = lipschitz_probe(theta, phi, g, seed=1)
    doubled = dict(phi, **{"mlp.w2": 2 * phi["mlp.w2"], "mlp.b2": 2 * phi["mlp.b2"]})
    rep = lipschitz_probe(theta, doubled, g, seed=1)
    assert rep.L_w / base.L_w == pytest.approx(2.0, rel=0.1)
    assert base.L_x > 0 and base.L_w > 0 and base.kappa > 0


def test_lipschitz_probe_zero_model(small):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    zero = {k: np.zeros_like(v) for k, v in phi.items()}
    with pytest.raises(DegenerateModel):
        lipschitz_probe(theta, zero, small["train"][0])
    with pytest.raises(ValueError):
        lipschitz_probe(theta, phi, small["train"][0], n_samples=5)


def test_sharpness_quadratic_and_zero(small):
    a, rho = 2.5, 0.3
    inc = param_loss_increase(lambda p: ad.scale(ad.sq_norm(p["w"]), a), {"w": np.zeros(1)}, rho)
    assert inc == pytest.approx(a * rho**2, rel=1e-12)
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    assert sam_sharpness(theta, phi, small["train"][:8], 0.0) == 0.0


def test_sharpness_non_decreasing_in_rho(small):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    vals = [sam_sharpness(theta, phi, small["train"][:16], rho) for rho in (0.01, 0.05, 0.1)]
    assert vals[0] <= vals[1] <= vals[2]


def test_sharpness_at_least_gradient_step(small):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    assert sam_sharpness(theta, phi, small["train"][:16], 0.05, n_dirs=0) > 0


def test_diagnostic_rows_radius_zero_iff_misclassified(small):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    graphs = small["id_test"][:20]
    rows = diagnostic_rows(theta, phi, "id_test", graphs)
    assert [r["sample_id"] for r in rows] == list(range(20))
    for r in rows:
        assert (r["radius"] > 0) == (r["margin"] > 0)
    with pytest.raises(ValueError):
        radius_distribution(theta, phi, [])


def test_radius_distribution_confident_head(small):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    graphs = [g for g in small["id_test"] if g.label == 1][:10]
    # a head that always favours class 1 by a wide margin
    phi = dict(phi, **{"mlp.b2": phi["mlp.b2"] + np.array([0.0, 50.0, 0.0])})
    assert all(r.value > 0 for r in radius_distribution(theta, phi, graphs))


def test_oracle_and_approx_agree_on_affine_embeddings():
    rng = np.random.default_rng(11)
    W, b = rng.standard_normal((6, 2)), rng.standard_normal(2)
    head = affine_head(W, b)
    for i in range(10):
        H = rng.standard_normal(6)
        y = int(np.argmax(H @ W + b))
        assert abs(margin_radius(H, y, head).value - oracle_radius(H, y, head, r_max=100.0, seed=i).value) <= 1e-4 + 1e-6
