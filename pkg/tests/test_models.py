import numpy as np
import pytest

from bgcond import autodiff as ad
from bgcond.errors import AdjacencyRequired, EmptyMask, InvalidParams
from bgcond.graph import make_graph, normalize_adjacency
from bgcond.models import (
    ModelParams,
    ModelSpec,
    evaluate_accuracy,
    forward,
    init_params,
    load_params,
    predict_logits,
    save_params,
    train,
)


def _dense_norm(g):
    M = g.adjacency.toarray() + np.eye(g.num_nodes)
    s = 1 / np.sqrt(M.sum(1))
    return M * s[:, None] * s[None, :]


def test_gcn_forward_matches_dense(toy_graph):
    spec = ModelSpec("GCN", layers=2, hidden=5)
    p = init_params(spec, 4, 2, seed=3)
    p.biases = [np.full((1, 5), 0.1), np.full((1, 2), -0.2)]
    A = _dense_norm(toy_graph)
    X = toy_graph.features
    h = np.maximum(A @ X @ p.weights[0] + p.biases[0], 0)
    expect = A @ h @ p.weights[1] + p.biases[1]
    got = forward(spec, p, normalize_adjacency(toy_graph), X).data
    assert np.abs(got - expect).max() <= 1e-10


def test_sgc_equals_linear_gcn(toy_graph):
    rng = np.random.default_rng(0)
    W0, W1 = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    A = _dense_norm(toy_graph)
    linear_gcn = A @ (A @ toy_graph.features @ W0) @ W1
    spec = ModelSpec("SGC", k=2)
    got = forward(spec, ModelParams([W0 @ W1]), normalize_adjacency(toy_graph), toy_graph.features).data
    assert np.abs(got - linear_gcn).max() <= 1e-10


def test_sgc_k0_is_linear(toy_graph):
    W = np.random.default_rng(1).normal(size=(4, 2))
    got = forward(ModelSpec("SGC", k=0), ModelParams([W]), normalize_adjacency(toy_graph), toy_graph.features).data
    np.testing.assert_allclose(got, toy_graph.features @ W, atol=1e-14)


def test_mlp_identical_rows_identical_logits():
    X = np.tile(np.arange(4.0), (3, 1))
    spec = ModelSpec("MLP", hidden=7)
    out = forward(spec, init_params(spec, 4, 3, 0), None, X).data
    assert np.all(out == out[0])


def test_mlp_ignores_adjacency(toy_graph):
    spec = ModelSpec("MLP", hidden=7)
    p = init_params(spec, 4, 2, 0)
    a = forward(spec, p, None, toy_graph.features).data
    b = forward(spec, p, normalize_adjacency(toy_graph), toy_graph.features).data
    np.testing.assert_array_equal(a, b)


def test_graph_models_need_adjacency(toy_graph):
    for kind in ("GCN", "SGC"):
        spec = ModelSpec(kind)
        with pytest.raises(AdjacencyRequired):
            forward(spec, init_params(spec, 4, 2, 0), None, toy_graph.features)


def test_spec_validation():
    with pytest.raises(InvalidParams):
        ModelSpec("GAT")
    with pytest.raises(InvalidParams):
        ModelSpec(layers=0)


@pytest.mark.parametrize("kind", ["GCN", "SGC", "MLP"])
def test_permutation_equivariance(kind, sbm_small):
    spec = ModelSpec(kind, hidden=16)
    p = init_params(spec, sbm_small.num_features, sbm_small.num_classes, 2)
    perm = np.random.default_rng(5).permutation(sbm_small.num_nodes)
    base = predict_logits(spec, p, sbm_small)
    moved = predict_logits(spec, p, sbm_small.relabel(perm))
    # node i is renamed perm[i]
    assert np.abs(moved[perm] - base).max() <= 1e-10


def test_eval_mode_deterministic(sbm_small):
    spec = ModelSpec("GCN", hidden=16, dropout=0.5)
    p = init_params(spec, sbm_small.num_features, sbm_small.num_classes, 2)
    np.testing.assert_array_equal(predict_logits(spec, p, sbm_small), predict_logits(spec, p, sbm_small))


def test_train_separable_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(-2, 0.5, size=(20, 2)), rng.normal(2, 0.5, size=(20, 2))])
    y = np.repeat([0, 1], 20)
    g = make_graph(40, [], X, y, train=np.arange(40))
    for kind in ("MLP", "SGC", "GCN"):
        spec = ModelSpec(kind, hidden=8)
        p = train(spec, g, g.train, epochs=200, seed=0)
        assert evaluate_accuracy(p, spec, g, g.train) == 1.0, kind


def test_train_zero_epochs_returns_init(sbm_small):
    spec = ModelSpec("GCN", hidden=8)
    p = train(spec, sbm_small, sbm_small.train, epochs=0, seed=4)
    init = init_params(spec, sbm_small.num_features, sbm_small.num_classes, 4)
    for a, b in zip(p.arrays(), init.arrays()):
        np.testing.assert_array_equal(a, b)


def test_train_deterministic(sbm_small):
    spec = ModelSpec("GCN", hidden=8)
    a = train(spec, sbm_small, sbm_small.train, epochs=20, seed=4)
    b = train(spec, sbm_small, sbm_small.train, epochs=20, seed=4)
    for x, y in zip(a.arrays(), b.arrays()):
        assert x.tobytes() == y.tobytes()


def test_train_empty_mask(sbm_small):
    with pytest.raises(EmptyMask):
        train(ModelSpec(), sbm_small, [], epochs=1)


def test_accuracy_perfect_and_tie_break():
    g = make_graph(4, [], np.zeros((4, 1)), [0, 1, 0, 1], train=[0, 1, 2, 3])
    spec = ModelSpec("MLP")
    logits = np.eye(2)[[0, 1, 0, 1]]
    assert evaluate_accuracy(None, spec, g, g.train, logits=logits) == 1.0
    assert evaluate_accuracy(None, spec, g, g.train, logits=np.zeros((4, 2))) == 0.5
    with pytest.raises(EmptyMask):
        evaluate_accuracy(None, spec, g, [], logits=logits)


def test_random_gcn_on_cora_is_chance(cora_graph):
    spec = ModelSpec("GCN", hidden=64)
    accs = [
        evaluate_accuracy(init_params(spec, cora_graph.num_features, 7, s), spec, cora_graph, cora_graph.test)
        for s in range(10)
    ]
    assert abs(np.mean(accs) - 1 / 7) <= 0.1


def test_params_round_trip(tmp_path):
    spec = ModelSpec("GCN", hidden=3)
    p = init_params(spec, 4, 2, 9)
    save_params(p, spec, tmp_path / "m", extra={"note": 1})
    q, spec2, side = load_params(tmp_path / "m")
    assert spec2 == spec and q.seed == 9 and side["note"] == 1
    for a, b in zip(p.arrays(), q.arrays()):
        np.testing.assert_array_equal(a, b)


def test_gcn_weight_gradients_match_fd(toy_graph):
    from conftest import central_difference, rel_err

    spec = ModelSpec("GCN", hidden=3, dropout=0.0)
    p = init_params(spec, 4, 2, 1)
    A = normalize_adjacency(toy_graph)
    y = toy_graph.labels

    def loss(W0, W1, b0, b1):
        return ad.cross_entropy_mean(forward(spec, ModelParams([W0, W1], [b0, b1]), A, toy_graph.features), y)

    arrays = p.arrays()
    _, grads = ad.grad(loss, *arrays)
    for i in range(4):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return loss(*args).item()

        assert rel_err(grads[i], central_difference(f, arrays[i])) <= 1e-6
