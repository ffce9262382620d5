import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2a import autodiff as ad
from e2a.errors import FormatError, ShapeMismatch
from e2a.gnn import (
    GraphBatch,
    ModelConfig,
    TrainConfig,
    classify,
    embed,
    erm_loss,
    evaluate,
    gin_forward,
    init_model,
    load_checkpoint,
    predict,
    train_erm,
)
from e2a.syngraph import Graph, degree_features, make_graph, make_motif_dataset


@pytest.fixture(scope="module")
def small():
    return make_motif_dataset(shift="basis", seed=7, counts=50)


def _graph(edges, n, d_in=4, label=0):
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    deg = np.bincount(e.reshape(-1), minlength=n)
    return Graph(n, e, degree_features(deg, d_in), label, 0)


def test_isolated_zero_graph_embeds_to_zero():
    g = Graph(1, np.zeros((0, 2), dtype=np.int64), np.zeros((1, 4)), 0, 0)
    theta, _ = init_model(4, 3, ModelConfig(), 0)
    theta = {k: (np.zeros_like(v) if ".b" in k else v) for k, v in theta.items()}
    np.testing.assert_array_equal(gin_forward(theta, g).numpy(), np.zeros((1, 32)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), label=st.integers(0, 2))
def test_permutation_invariance(seed, label):
    rng = np.random.default_rng(seed)
    g = make_graph("tree", int(rng.integers(6, 13)), label, 4, rng)
    theta, _ = init_model(4, 3, ModelConfig(), seed)
    perm = rng.permutation(g.n_nodes)
    np.testing.assert_allclose(gin_forward(theta, g.relabel(perm)).numpy(), gin_forward(theta, g).numpy(), rtol=0, atol=1e-9)


def test_path_and_star_differ():
    path = _graph([(i, i + 1) for i in range(4)], 5)
    star = _graph([(0, i) for i in range(1, 5)], 5)
    d = 4
    eye = {}
    for layer in range(3):
        eye[f"gin.{layer}.w1"] = np.eye(d)
        eye[f"gin.{layer}.b1"] = np.zeros(d)
        eye[f"gin.{layer}.w2"] = np.eye(d)
        eye[f"gin.{layer}.b2"] = np.zeros(d)
    Hp, Hs = gin_forward(eye, path).numpy(), gin_forward(eye, star).numpy()
    # one layer of A + I with identity weights, applied three times, then summed
    A = lambda n, e: np.eye(n) + sum(np.outer(np.eye(n)[i], np.eye(n)[j]) + np.outer(np.eye(n)[j], np.eye(n)[i]) for i, j in e)  # noqa: E731
    for g, H in ((path, Hp), (star, Hs)):
        M = A(g.n_nodes, g.edges)
        np.testing.assert_allclose(H[0], (M @ M @ M @ g.node_features).sum(axis=0))
    assert not np.allclose(Hp, Hs)


def test_encoder_width_mismatch(small):
    theta, _ = init_model(5, 3, ModelConfig(), 0)
    with pytest.raises(ShapeMismatch):
        gin_forward(theta, small["train"][0])


def test_classify_zero_embedding_returns_bias():
    _, phi = init_model(4, 3, ModelConfig(), 0)
    phi = {k: np.zeros_like(v) for k, v in phi.items()}
    phi["mlp.b2"] = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(classify(phi, np.zeros(32)).numpy(), [[0.5, -1.0, 2.0]])
    with pytest.raises(ShapeMismatch):
        classify(phi, np.zeros(31))


def test_bias_shift_keeps_argmax():
    _, phi = init_model(4, 3, ModelConfig(), 1)
    H = np.random.default_rng(0).standard_normal((20, 32))
    S = classify(phi, H).numpy()
    shifted = dict(phi, **{"mlp.b2": phi["mlp.b2"] + 3.0})
    S2 = classify(shifted, H).numpy()
    np.testing.assert_allclose(S2, S + 3.0)
    np.testing.assert_array_equal(predict(S2), predict(S))


def test_predict_ties_go_to_lowest_index():
    np.testing.assert_array_equal(predict([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]), [0, 1])


def test_uniform_and_confident_cross_entropy():
    y = np.array([0, 1, 2])
    np.testing.assert_allclose(ad.softmax_cross_entropy(np.zeros((3, 3)), y).item(), np.log(3.0), rtol=1e-12)
    assert ad.softmax_cross_entropy(np.eye(3) * 100.0, y).item() < 1e-40


def test_random_init_loss_near_log3():
    ds = make_motif_dataset(shift="basis", seed=7)
    batch = GraphBatch.from_graphs(ds["train"][:32])
    # sum readout spreads single-init losses (seed 0 gives 1.34); the median over inits is the stable quantity
    losses = [erm_loss(*init_model(4, 3, ModelConfig(), s), batch).item() for s in range(20)]
    assert abs(np.median(losses) - np.log(3.0)) < 0.2


def test_erm_loss_gradient():
    rng = np.random.default_rng(0)
    batch = GraphBatch.from_graphs([make_graph("path", 6, i % 3, 4, rng) for i in range(4)])
    theta, phi = init_model(4, 3, ModelConfig(d_h=8, n_layers=2), 0)
    err = ad.finite_diff_check_params(lambda p: erm_loss(p, p, batch), {**theta, **phi}, max_coords=12)
    assert err < 1e-4


def test_zero_epochs_leaves_params(small):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    res = train_erm(theta, phi, small, TrainConfig(epochs=0))
    assert res.trace == []
    for k in theta:
        np.testing.assert_array_equal(res.theta[k], theta[k])


def test_training_is_deterministic(small):
    runs = []
    for _ in range(2):
        theta, phi = init_model(4, 3, ModelConfig(), 3)
        runs.append(train_erm(theta, phi, small, TrainConfig(epochs=3, seed=3)))
    assert runs[0].trace == runs[1].trace
    for k in runs[0].phi:
        assert runs[0].phi[k].tobytes() == runs[1].phi[k].tobytes()


def test_trace_shape(small, tmp_path):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    res = train_erm(theta, phi, small, TrainConfig(epochs=3), checkpoint_dir=tmp_path, keep_checkpoints=[2])
    assert [r["epoch"] for r in res.trace] == [1, 2, 3]
    for r in res.trace:
        for s in ("train", "val", "id_test", "ood_test"):
            assert 0.0 <= r[f"{s}_acc"] <= 1.0
    assert sorted(res.checkpoints) == [2]
    assert sorted(p.name for p in tmp_path.iterdir()) == [f"epoch_000{i}.e2am" for i in (1, 2, 3)]
    th, ph, cv, meta = load_checkpoint(tmp_path / "epoch_0003.e2am")
    assert meta["epoch"] == 3 and meta["seed"] == 0 and cv == {}
    for k in res.phi:
        np.testing.assert_array_equal(ph[k], res.phi[k])


def test_checkpoint_wrong_magic(tmp_path, small):
    from e2a.syngraph import dataset_save

    dataset_save(small, tmp_path / "d")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "d")


def test_evaluate_constant_predictor(small):
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    phi = {k: np.zeros_like(v) for k, v in phi.items()}
    assert evaluate(theta, phi, small["id_test"]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        evaluate(theta, phi, [])


def test_evaluate_perfect_labels(small):
    """A head reading a fixed labelling of the embeddings scores 1.0 on that labelling."""
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    graphs = small["id_test"][:30]
    pred = predict(classify(phi, embed(theta, graphs)))
    relabelled = [Graph(g.n_nodes, g.edges, g.node_features, int(p), g.env_id) for g, p in zip(graphs, pred)]
    assert evaluate(theta, phi, relabelled) == 1.0


def test_embed_matches_batched_forward(small):
    theta, _ = init_model(4, 3, ModelConfig(), 0)
    graphs = small["val"][:50]
    np.testing.assert_allclose(embed(theta, graphs, chunk=7), gin_forward(theta, graphs).numpy(), atol=1e-12)


def test_erm_basis_fits_train_and_loses_ood():
    ds = make_motif_dataset(shift="basis", seed=7)
    theta, phi = init_model(4, 3, ModelConfig(), 0)
    last = train_erm(theta, phi, ds, TrainConfig(epochs=100), keep_checkpoints=()).trace[-1]
    assert last["train_acc"] >= 0.95
    assert last["id_test_acc"] - last["ood_test_acc"] >= 0.10
