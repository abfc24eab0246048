import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from bgcond.errors import BundleCorrupt, BundleIncomplete, InvalidParams, NodeOutOfRange
from bgcond.graph import (
    Trigger,
    attach_trigger,
    attach_triggers,
    edge_list,
    generate_sbm_graph,
    load_graph_bundle,
    make_graph,
    normalize_adjacency,
    save_graph_bundle,
    subsample_edges,
)
from bgcond.models import ModelSpec, evaluate_accuracy, train


def dense_normalized(A):
    M = np.asarray(A, dtype=float) + np.eye(A.shape[0])
    s = 1.0 / np.sqrt(M.sum(axis=1))
    return M * s[:, None] * s[None, :]


@st.composite
def small_graphs(draw, max_nodes=50):
    n = draw(st.integers(1, max_nodes))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if pairs:
        picks = draw(st.lists(st.sampled_from(pairs), max_size=min(len(pairs), 120)))
    else:
        picks = []
    return make_graph(n, picks, np.zeros((n, 1)), np.zeros(n, dtype=int))


def _trigger(g, rng, d, density=0.5):
    upper = np.triu(rng.random((g, g)) < density, 1).astype(float)
    return Trigger.from_arrays(rng.normal(size=(g, d)), upper + upper.T)


# --- normalization -----------------------------------------------------------


@given(small_graphs())
def test_normalize_matches_dense_oracle(g):
    A = g.adjacency.toarray()
    got = normalize_adjacency(g).matrix.toarray()
    assert np.abs(got - dense_normalized(A)).max() <= 1e-12
    np.testing.assert_array_equal(got, got.T)


def test_normalize_isolated_node():
    g = make_graph(1, [], [[0.0]], [0])
    np.testing.assert_array_equal(normalize_adjacency(g).matrix.toarray(), [[1.0]])


def test_normalize_single_edge():
    g = make_graph(2, [(0, 1)], np.zeros((2, 1)), [0, 0])
    np.testing.assert_allclose(normalize_adjacency(g).matrix.toarray(), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_normalize_path_of_three():
    g = make_graph(3, [(0, 1), (1, 2)], np.zeros((3, 1)), [0, 0, 0])
    M = normalize_adjacency(g).matrix.toarray()
    end = 1 / np.sqrt(2 * 3)
    np.testing.assert_allclose(M[0, 1], end, atol=1e-15)
    np.testing.assert_allclose(M[2, 1], end, atol=1e-15)
    np.testing.assert_allclose(np.diag(M), [1 / 2, 1 / 3, 1 / 2], atol=1e-15)
    assert M[0, 2] == 0


def test_normalize_entries_follow_degrees(toy_graph):
    M = normalize_adjacency(toy_graph).matrix
    deg = toy_graph.degrees
    coo = M.tocoo()
    expect = 1 / np.sqrt((deg[coo.row] + 1) * (deg[coo.col] + 1))
    np.testing.assert_allclose(coo.data, expect, rtol=1e-14)


# --- graph invariants --------------------------------------------------------


@given(small_graphs())
def test_adjacency_symmetric_no_self_loops(g):
    A = g.adjacency
    assert (A != A.T).nnz == 0
    assert A.diagonal().sum() == 0
    assert set(np.unique(A.data)) <= {1.0}


def test_self_loops_in_input_are_dropped():
    g = make_graph(3, [(0, 0), (0, 1)], np.zeros((3, 1)), [0, 0, 0])
    assert g.num_edges == 1


# --- bundles -----------------------------------------------------------------


def test_bundle_round_trip(tmp_path, sbm_small):
    # float32-representable features survive bit for bit
    g = make_graph(
        sbm_small.num_nodes,
        edge_list(sbm_small.adjacency),
        sbm_small.features.astype(np.float32).astype(np.float64),
        sbm_small.labels,
        sbm_small.num_classes,
        sbm_small.train,
        sbm_small.val,
        sbm_small.test,
        name=sbm_small.name,
    )
    back = load_graph_bundle(save_graph_bundle(g, tmp_path / "b"))
    np.testing.assert_array_equal(back.features, g.features)
    assert (back.adjacency != g.adjacency).nnz == 0
    np.testing.assert_array_equal(back.labels, g.labels)
    for k in ("train", "val", "test"):
        np.testing.assert_array_equal(getattr(back, k), getattr(g, k))
    assert back.num_classes == g.num_classes and back.name == g.name


def _write_bundle(path, n=3, d=2, c=2, edges="0\t1\n", labels=None, feats=None):
    path.mkdir()
    (path / "meta.json").write_text(json.dumps({"num_nodes": n, "num_features": d, "num_classes": c}))
    (feats if feats is not None else np.zeros((n, d))).astype("<f4").tofile(path / "features.f32")
    (path / "edges.tsv").write_text(edges)
    (path / "labels.txt").write_text("\n".join(str(x) for x in (labels if labels is not None else [0] * n)))
    (path / "splits.json").write_text(json.dumps({"train": [0], "val": [1], "test": [2]}))
    return path


def test_bundle_deduplicates_reverse_edges(tmp_path):
    g = load_graph_bundle(_write_bundle(tmp_path / "b", edges="0\t1\n1\t0\n0\t1\n"))
    assert g.num_edges == 1
    np.testing.assert_array_equal(g.adjacency.toarray(), [[0, 1, 0], [1, 0, 0], [0, 0, 0]])


def test_bundle_single_node_no_edges(tmp_path):
    p = tmp_path / "one"
    p.mkdir()
    (p / "meta.json").write_text(json.dumps({"num_nodes": 1, "num_features": 2, "num_classes": 1}))
    np.zeros((1, 2), "<f4").tofile(p / "features.f32")
    (p / "edges.tsv").write_text("")
    (p / "labels.txt").write_text("0\n")
    (p / "splits.json").write_text(json.dumps({"train": [0], "val": [], "test": []}))
    g = load_graph_bundle(p)
    assert g.num_nodes == 1 and g.adjacency.nnz == 0


def test_bundle_missing_file(tmp_path):
    p = _write_bundle(tmp_path / "b")
    (p / "labels.txt").unlink()
    with pytest.raises(BundleIncomplete):
        load_graph_bundle(p)


def test_bundle_label_out_of_range(tmp_path):
    with pytest.raises(BundleCorrupt):
        load_graph_bundle(_write_bundle(tmp_path / "b", labels=[0, 1, 2]))


def test_bundle_feature_row_mismatch(tmp_path):
    with pytest.raises(BundleCorrupt):
        load_graph_bundle(_write_bundle(tmp_path / "b", feats=np.zeros((2, 2))))


def test_cora_bundle_statistics(cora_bundle):
    g = load_graph_bundle(cora_bundle)
    assert (g.num_nodes, g.num_features, g.num_classes) == (2708, 1433, 7)
    assert (len(g.train), len(g.val), len(g.test)) == (140, 500, 1000)
    assert not set(g.train) & set(g.val) and not set(g.val) & set(g.test) and not set(g.train) & set(g.test)


# --- SBM ---------------------------------------------------------------------


def test_sbm_deterministic():
    a = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 7)
    b = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 7)
    assert (a.adjacency != b.adjacency).nnz == 0
    assert a.features.tobytes() == b.features.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(a.train, b.train)


def test_sbm_limit_is_two_cliques():
    g = generate_sbm_graph(20, 2, 4, 1.0, 0.0, 3)
    same = g.labels[:, None] == g.labels[None, :]
    np.testing.assert_array_equal(g.adjacency.toarray(), (same & ~np.eye(20, dtype=bool)).astype(float))


def test_sbm_rejects_bad_probabilities():
    with pytest.raises(InvalidParams):
        generate_sbm_graph(30, 2, 4, 0.1, 0.1, 0)
    with pytest.raises(InvalidParams):
        generate_sbm_graph(30, 1, 4, 0.5, 0.1, 0)


def test_sbm_splits_stratified():
    g = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 7)
    assert len(g.train) + len(g.val) + len(g.test) == 300
    for c in range(3):
        assert np.sum(g.labels[g.train] == c) == 10


def test_sbm_gcn_reaches_ninety_percent():
    g = generate_sbm_graph(300, 3, 16, 0.2, 0.01, 7)
    spec = ModelSpec("GCN", layers=2, hidden=64)
    params = train(spec, g, g.train, epochs=200, seed=0)
    assert evaluate_accuracy(params, spec, g, g.test) >= 0.9


# --- trigger attachment ------------------------------------------------------


def test_attach_counts():
    rng = np.random.default_rng(0)
    g = generate_sbm_graph(10, 2, 3, 0.6, 0.1, 1)
    t = _trigger(4, rng, 3)
    aug = attach_trigger(g, 5, t)
    assert aug.num_nodes == 14
    assert aug.degrees[5] == g.degrees[5] + 1
    A = aug.adjacency.toarray()
    assert A[5, 10] == 1 and A[10, 5] == 1
    np.testing.assert_array_equal(A[10:, 10:], t.adjacency)
    np.testing.assert_array_equal(aug.features, np.vstack([g.features, t.features]))


def test_attach_empty_trigger_adds_only_anchor_edge():
    g = generate_sbm_graph(10, 2, 3, 0.6, 0.1, 1)
    aug = attach_trigger(g, 2, Trigger.from_arrays(np.zeros((4, 3)), np.zeros((4, 4))))
    assert aug.adjacency.nnz // 2 - g.num_edges == 1


def test_attach_full_trigger_adds_seven_edges():
    g = generate_sbm_graph(10, 2, 3, 0.6, 0.1, 1)
    aug = attach_trigger(g, 2, Trigger.from_arrays(np.zeros((4, 3)), np.ones((4, 4))))
    assert aug.adjacency.nnz // 2 - g.num_edges == 7


def test_attach_out_of_range():
    g = generate_sbm_graph(10, 2, 3, 0.6, 0.1, 1)
    t = Trigger.from_arrays(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(NodeOutOfRange):
        attach_trigger(g, 10, t)
    with pytest.raises(NodeOutOfRange):
        attach_triggers(g, [0, -1], [t, t])


def test_trigger_rejects_asymmetric_or_nonbinary():
    with pytest.raises(InvalidParams):
        Trigger(np.zeros((2, 1)), np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros((2, 2)))
    with pytest.raises(InvalidParams):
        Trigger(np.zeros((2, 1)), np.array([[0.0, 0.5], [0.5, 0.0]]), np.zeros((2, 2)))


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_attach_order_insensitive(seed):
    rng = np.random.default_rng(seed)
    g = generate_sbm_graph(12, 2, 3, 0.5, 0.1, seed % 5)
    a, b = rng.choice(12, size=2, replace=False)
    t1, t2 = _trigger(int(rng.integers(1, 5)), rng, 3), _trigger(int(rng.integers(1, 5)), rng, 3)
    ab = attach_triggers(g, [a, b], [t1, t2])
    ba = attach_triggers(g, [b, a], [t2, t1])
    # documented layout: trigger blocks follow attachment order, so swap blocks
    n, s1, s2 = 12, t1.size, t2.size
    perm = np.concatenate([np.arange(n), n + s2 + np.arange(s1), n + np.arange(s2)])
    A = ab.adjacency.toarray()
    B = ba.adjacency.toarray()[np.ix_(perm, perm)]
    np.testing.assert_array_equal(A, B)
    np.testing.assert_array_equal(ab.features, ba.features[perm])


def test_augmented_normalization_matches_dense():
    rng = np.random.default_rng(4)
    g = generate_sbm_graph(15, 3, 2, 0.5, 0.1, 2)
    aug = attach_triggers(g, [1, 7], [_trigger(3, rng, 2), _trigger(4, rng, 2)])
    got = normalize_adjacency(aug).matrix.toarray()
    assert np.abs(got - dense_normalized(aug.adjacency.toarray())).max() <= 1e-12


# --- edge subsampling ----------------------------------------------------------


def test_subsample_extremes(sbm_small):
    assert (subsample_edges(sbm_small, 1.0, 0).adjacency != sbm_small.adjacency).nnz == 0
    assert subsample_edges(sbm_small, 0.0, 0).adjacency.nnz == 0


def test_subsample_symmetric_and_deterministic(sbm_small):
    a = subsample_edges(sbm_small, 0.5, 3).adjacency
    b = subsample_edges(sbm_small, 0.5, 3).adjacency
    assert (a != b).nnz == 0 and (a != a.T).nnz == 0


def test_subsample_binomial_count():
    pairs = np.array([(i, j) for i in range(60) for j in range(i + 1, 60)])[:1000]
    g = make_graph(60, pairs, np.zeros((60, 1)), np.zeros(60, dtype=int))
    assert g.num_edges == 1000
    sigma = np.sqrt(1000 * 0.25)
    for seed in range(100):
        kept = subsample_edges(g, 0.5, seed).num_edges
        assert abs(kept - 500) <= 3 * sigma, (seed, kept)


def test_subsample_rejects_bad_probability(sbm_small):
    with pytest.raises(InvalidParams):
        subsample_edges(sbm_small, 1.5, 0)


def test_edge_list_sorted_upper():
    A = sp.csr_matrix(np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=float))
    np.testing.assert_array_equal(edge_list(A), [[0, 1], [0, 2], [1, 2]])
