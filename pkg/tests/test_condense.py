import numpy as np
import pytest

from bgcond import autodiff as ad
from bgcond.condense import (
    CondensationConfig,
    IdentityStructure,
    PairwiseStructure,
    SyntheticGraph,
    _SyntheticOptimizer,
    class_masks,
    condense_clean,
    generate_structure,
    init_synthetic,
    load_synthetic,
    matching_grad_wrt_features,
    matching_loss,
    save_synthetic,
    source_features,
    train_surrogate,
)
from bgcond.errors import EmptyMask, InvalidParams, SecondOrderUnsupported, StructureModeMismatch
from bgcond.graph import make_graph

from conftest import central_difference, rel_err


def _dense_norm(A):
    M = A + np.eye(A.shape[0])
    s = 1 / np.sqrt(M.sum(1))
    return M * s[:, None] * s[None, :]


def _softmax(Z):
    e = np.exp(Z - Z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def _dense_matching(Z_syn, y_syn, Z_src, y_src, train, W):
    # independent re-derivation: per-class SGC gradients and column cosine distance
    C = W.shape[1]
    total = 0.0
    for c in range(C):
        a = np.flatnonzero(y_syn == c)
        b = train[y_src[train] == c]
        if len(a) == 0 and len(b) == 0:
            continue
        if len(a) == 0 or len(b) == 0:
            total += C
            continue
        ga = Z_syn[a].T @ (_softmax(Z_syn[a] @ W) - np.eye(C)[y_syn[a]]) / len(a)
        gb = Z_src[b].T @ (_softmax(Z_src[b] @ W) - np.eye(C)[y_src[b]]) / len(b)
        for j in range(C):
            na, nb = np.linalg.norm(ga[:, j]), np.linalg.norm(gb[:, j])
            if na > 0 and nb > 0:
                total += 1 - ga[:, j] @ gb[:, j] / (na * nb)
    return total


# --- init ---------------------------------------------------------------------


def test_init_size_from_train_split(cora_graph):
    S = init_synthetic(cora_graph, 0.026, 0, ratio_base="train")
    assert S.num_nodes == max(7, round(0.026 * 140))
    assert set(S.labels) == set(range(7))


def test_init_size_from_node_count(cora_graph):
    S = init_synthetic(cora_graph, 0.026, 0)
    assert S.num_nodes == round(0.026 * 2708)


def test_init_histogram_proportional(cora_graph):
    S = init_synthetic(cora_graph, 0.026, 0)
    train_hist = np.bincount(cora_graph.labels[cora_graph.train], minlength=7)
    quota = train_hist / train_hist.sum() * S.num_nodes
    assert np.all(np.abs(np.bincount(S.labels, minlength=7) - quota) <= 1)


def test_init_clamps_to_one_per_class(sbm_small):
    S = init_synthetic(sbm_small, 1e-4, 0)
    np.testing.assert_array_equal(np.bincount(S.labels), [1, 1, 1])


def test_init_rows_come_from_same_class(sbm_small):
    S = init_synthetic(sbm_small, 0.2, 3)
    X, y = sbm_small.features, sbm_small.labels
    train = sbm_small.train
    for row, label in zip(S.features, S.labels):
        pool = train[y[train] == label]
        assert np.any(np.all(X[pool] == row, axis=1))


def test_init_deterministic(sbm_small):
    a = init_synthetic(sbm_small, 0.2, 3)
    b = init_synthetic(sbm_small, 0.2, 3)
    np.testing.assert_array_equal(a.features, b.features)
    for p, q in zip(a.structure.params, b.structure.params):
        np.testing.assert_array_equal(p, q)


def test_init_errors(sbm_small):
    empty = make_graph(3, [], np.zeros((3, 1)), [0, 1, 0])
    with pytest.raises(EmptyMask):
        init_synthetic(empty, 0.5, 0)
    with pytest.raises(InvalidParams):
        init_synthetic(sbm_small, 0.0, 0)


def test_config_validation():
    with pytest.raises(InvalidParams):
        CondensationConfig(method="KRR")
    with pytest.raises(InvalidParams):
        CondensationConfig(epochs=0)
    cfg = CondensationConfig(ratio=0.05, seed=4)
    assert CondensationConfig.from_dict(cfg.to_dict()) == cfg


# --- structure ------------------------------------------------------------------


def _phi(d, seed, threshold=0.5):
    return PairwiseStructure.init(d, 6, threshold, np.random.default_rng(seed))


def test_structure_symmetric_unit_interval():
    X = np.random.default_rng(0).normal(size=(7, 3))
    X[4] = X[2]
    A = generate_structure(_phi(3, 1, threshold=0.0), X).data
    np.testing.assert_array_equal(A, A.T)
    assert np.all(np.diag(A) == 0) and A.min() >= 0 and A.max() <= 1


def test_structure_threshold_one_zeroes_everything():
    X = np.random.default_rng(0).normal(size=(7, 3))
    assert np.all(generate_structure(_phi(3, 1, threshold=1.0), X).data == 0)


def test_structure_wrong_mode():
    with pytest.raises(StructureModeMismatch):
        generate_structure(IdentityStructure(), np.zeros((2, 2)))


def test_structure_gradient_matches_fd():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(5, 3))
        phi = _phi(3, seed, threshold=0.0).params
        R = rng.normal(size=(5, 5))

        def scalar(*ps):
            return ad.total(ad.mul(generate_structure(list(ps), X, 0.0), R))

        _, grads = ad.grad(scalar, *phi)
        for i in range(4):
            def f(x, i=i):
                ps = list(phi)
                ps[i] = x
                return scalar(*ps).item()

            assert rel_err(grads[i], central_difference(f, phi[i])) <= 1e-4


# --- matching loss ------------------------------------------------------------


def _toy_source(toy_graph):
    # all six nodes are training nodes so a synthetic copy reproduces the source exactly
    return make_graph(6, np.array([(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (3, 5)]),
                      toy_graph.features, toy_graph.labels, train=np.arange(6))


def test_matching_loss_zero_on_exact_copy(toy_graph):
    g = _toy_source(toy_graph)
    W = np.random.default_rng(0).normal(size=(4, 2))
    S = SyntheticGraph(g.features.copy(), g.labels.copy(), 2, IdentityStructure())
    loss = matching_loss(S, g, W, method="DC-Graph")
    assert abs(loss.item()) < 1e-12


def test_matching_loss_matches_dense_oracle(toy_graph):
    rng = np.random.default_rng(2)
    W = rng.normal(size=(4, 2))
    S = init_synthetic(toy_graph, 0.5, 1, method="GCond", threshold=0.0, structure_hidden=5)
    S.features = rng.normal(size=S.features.shape)
    A_syn = generate_structure(S.structure, S.features).data
    Z_syn = _dense_norm(A_syn) @ _dense_norm(A_syn) @ S.features
    A_src = _dense_norm(toy_graph.adjacency.toarray())
    Z_src = A_src @ A_src @ toy_graph.features
    expect = _dense_matching(Z_syn, S.labels, Z_src, toy_graph.labels, toy_graph.train, W)
    got = matching_loss(S, toy_graph, W, method="GCond").item()
    assert abs(got - expect) <= 1e-10


def test_matching_loss_missing_class_adds_full_distance(toy_graph):
    W = np.random.default_rng(0).normal(size=(4, 2))
    S = SyntheticGraph(toy_graph.features[:2].copy(), np.array([0, 0]), 2, IdentityStructure())
    got = matching_loss(S, toy_graph, W, method="DC-Graph").item()
    Z = toy_graph.features
    expect = _dense_matching(S.features, S.labels, Z, toy_graph.labels, toy_graph.train, W)
    assert abs(got - expect) <= 1e-10 and got >= 2.0


def test_matching_loss_nonnegative(sbm_small):
    S = init_synthetic(sbm_small, 0.1, 0)
    W = np.random.default_rng(0).normal(size=(sbm_small.num_features, 3))
    assert matching_loss(S, sbm_small, W).item() >= 0


def test_matching_grad_matches_fd(toy_graph):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        W = rng.normal(size=(4, 2))
        for method in ("GCond-X", "DC-Graph", "GCond"):
            S = init_synthetic(toy_graph, 0.5, seed, method=method, threshold=0.0, structure_hidden=5)
            S.features = rng.normal(size=S.features.shape)
            grad = matching_grad_wrt_features(S, toy_graph, W, method=method)

            def f(x):
                return matching_loss(S, toy_graph, W, method=method, X=x).item()

            assert rel_err(grad, central_difference(f, S.features)) <= 1e-4, (seed, method)


def test_matching_grad_rejects_nonlinear_surrogate(toy_graph):
    S = init_synthetic(toy_graph, 0.5, 0)
    with pytest.raises(SecondOrderUnsupported):
        matching_grad_wrt_features(S, toy_graph, np.zeros((4, 2)), surrogate="GCN")


# --- loop -----------------------------------------------------------------------


def test_single_epoch_is_one_sgd_step(sbm_small):
    cfg = CondensationConfig(method="GCond-X", ratio=0.1, epochs=1, optimizer="sgd", lr_features=0.05, seed=2)
    S0 = init_synthetic(sbm_small, cfg.ratio, cfg.seed, method=cfg.method)
    W = train_surrogate(S0, cfg, [cfg.seed, 1, 0])
    grad = matching_grad_wrt_features(S0, sbm_small, W, method=cfg.method)
    S1 = condense_clean(sbm_small, cfg)
    delta = S1.features - S0.features
    np.testing.assert_allclose(delta, -cfg.lr_features * grad, atol=1e-14)
    assert np.linalg.norm(delta) <= cfg.lr_features * np.linalg.norm(grad) * (1 + 1e-12)


def test_labels_fixed_and_deterministic(sbm_small):
    cfg = CondensationConfig(ratio=0.1, epochs=5, seed=1)
    init = init_synthetic(sbm_small, cfg.ratio, cfg.seed)
    a = condense_clean(sbm_small, cfg)
    b = condense_clean(sbm_small, cfg)
    np.testing.assert_array_equal(a.labels, init.labels)
    assert a.features.tobytes() == b.features.tobytes()
    for p, q in zip(a.structure.params, b.structure.params):
        assert p.tobytes() == q.tobytes()
    assert len(a.trace) == 5


def test_identity_modes_keep_no_edges(sbm_small):
    for method in ("GCond-X", "DC-Graph"):
        S = condense_clean(sbm_small, CondensationConfig(method=method, ratio=0.1, epochs=2))
        assert S.adjacency.nnz == 0


def test_dc_graph_matches_raw_features(sbm_small):
    np.testing.assert_array_equal(source_features(sbm_small, "DC-Graph", 2), sbm_small.features)


@pytest.mark.parametrize("method", ["GCond", "GCond-X"])
def test_loss_trend_on_sbm(method, sbm_small):
    S = condense_clean(sbm_small, CondensationConfig(method=method, ratio=0.1, epochs=100, seed=0))
    tr = [r["matching_loss"] for r in S.trace]
    assert np.mean(tr[-10:]) <= np.mean(tr[:10])


def test_synthetic_round_trip(tmp_path, sbm_small):
    S = condense_clean(sbm_small, CondensationConfig(ratio=0.1, epochs=2))
    back = load_synthetic(save_synthetic(S, tmp_path / "s"))
    np.testing.assert_array_equal(back.features, S.features)
    np.testing.assert_array_equal(back.labels, S.labels)
    np.testing.assert_array_equal(back.dense_adjacency(), S.dense_adjacency())
    assert back.trace == S.trace


def test_optimizer_updates_structure(sbm_small):
    cfg = CondensationConfig(ratio=0.1, epochs=1)
    S = init_synthetic(sbm_small, cfg.ratio, 0)
    before = [p.copy() for p in S.structure.params]
    opt = _SyntheticOptimizer(S, cfg)
    Z = source_features(sbm_small, cfg.method, cfg.k)
    masks = class_masks(sbm_small.labels, sbm_small.train, 3)
    opt.step(Z, sbm_small.labels, masks, train_surrogate(S, cfg, 0))
    assert any(np.any(p != q) for p, q in zip(S.structure.params, before))
