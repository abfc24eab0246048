"""Sparse node-classification graphs, trigger attachment and bundle I/O.

Node-id layout of an augmented graph: the base graph's nodes keep their ids
``0..N-1``; trigger nodes follow in attachment order, each trigger occupying a
contiguous block of ``|g|`` ids.  Trigger node 0 of every block is the one wired
to the anchor.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BundleCorrupt, BundleIncomplete, InvalidParams, NodeOutOfRange

BUNDLE_FILES = ("meta.json", "features.f32", "edges.tsv", "labels.txt", "splits.json")


def _symmetric_binary(rows, cols, n: int) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    adj = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    adj.sort_indices()
    return adj


def edge_list(adj) -> np.ndarray:
    """Undirected edges as an ``[E, 2]`` array with ``src < dst``, lexicographically sorted."""
    coo = sp.triu(sp.csr_matrix(adj), k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class NodeGraph:
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    name: str = "graph"

    def __post_init__(self):
        n = self.features.shape[0]
        if self.adjacency.shape != (n, n):
            raise BundleCorrupt(f"adjacency shape {self.adjacency.shape} does not match {n} nodes")
        if self.labels.shape != (n,):
            raise BundleCorrupt("labels must be a vector with one entry per node")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise BundleCorrupt("label out of range")
        split_all = np.concatenate([self.train, self.val, self.test])
        if len(np.unique(split_all)) != len(split_all):
            raise BundleCorrupt("splits overlap")
        if len(split_all) and (split_all.min() < 0 or split_all.max() >= n):
            raise BundleCorrupt("split index out of range")

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    @cached_property
    def features_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.features)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    def with_adjacency(self, adjacency) -> "NodeGraph":
        return replace(self, adjacency=sp.csr_matrix(adjacency))

    def relabel(self, perm: np.ndarray) -> "NodeGraph":
        """Graph with node ``i`` renamed ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        p = sp.csr_matrix((np.ones(len(perm)), (perm, np.arange(len(perm)))), shape=(len(perm),) * 2)
        return NodeGraph(
            adjacency=sp.csr_matrix(p @ self.adjacency @ p.T),
            features=self.features[inv],
            labels=self.labels[inv],
            num_classes=self.num_classes,
            train=perm[self.train],
            val=perm[self.val],
            test=perm[self.test],
            name=self.name,
        )


def make_graph(
    num_nodes: int,
    edges: Iterable[Sequence[int]],
    features,
    labels,
    num_classes: int | None = None,
    train=(),
    val=(),
    test=(),
    name: str = "graph",
) -> NodeGraph:
    edges = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
    edges = edges.reshape(-1, 2)
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 1
    return NodeGraph(
        adjacency=_symmetric_binary(edges[:, 0], edges[:, 1], num_nodes),
        features=np.asarray(features, dtype=np.float64).reshape(num_nodes, -1),
        labels=labels,
        num_classes=int(num_classes),
        train=np.asarray(train, dtype=np.int64),
        val=np.asarray(val, dtype=np.int64),
        test=np.asarray(test, dtype=np.int64),
        name=name,
    )


@dataclass(frozen=True, eq=False)
class Trigger:
    features: np.ndarray
    adjacency: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        g = self.adjacency.shape[0]
        if self.adjacency.shape != (g, g) or self.logits.shape != (g, g):
            raise InvalidParams("trigger adjacency and logits must both be square of size |g|")
        if self.features.shape[0] != g:
            raise InvalidParams("trigger features must have |g| rows")
        if not np.isin(self.adjacency, (0.0, 1.0)).all():
            raise InvalidParams("trigger adjacency must be binary")
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise InvalidParams("trigger adjacency must be symmetric")

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_arrays(cls, features, adjacency) -> "Trigger":
        a = np.asarray(adjacency, dtype=np.float64).copy()
        np.fill_diagonal(a, 0.0)
        return cls(np.asarray(features, dtype=np.float64), a, a.copy())


def _base_adjacency(base) -> sp.csr_matrix:
    return sp.csr_matrix(base.adjacency)


@dataclass(frozen=True, eq=False)
class AugmentedGraph:
    """A base graph with triggers hanging off anchor nodes.

    ``labels`` optionally overrides the label vector of the whole augmented
    graph (base nodes followed by trigger nodes).
    """

    base: object
    attachments: tuple = ()
    labels_override: np.ndarray | None = field(default=None)
    train_override: np.ndarray | None = field(default=None)
    name: str = "augmented"

    @property
    def train(self) -> np.ndarray:
        return np.asarray(self.base.train) if self.train_override is None else self.train_override

    @property
    def val(self) -> np.ndarray:
        return np.asarray(getattr(self.base, "val", np.zeros(0, np.int64)))

    @property
    def test(self) -> np.ndarray:
        return np.asarray(getattr(self.base, "test", np.zeros(0, np.int64)))

    @property
    def base_nodes(self) -> int:
        return self.base.num_nodes

    @property
    def num_nodes(self) -> int:
        return self.base_nodes + sum(t.size for _, t in self.attachments)

    @property
    def num_features(self) -> int:
        return self.base.features.shape[1]

    @property
    def anchors(self) -> np.ndarray:
        return np.array([a for a, _ in self.attachments], dtype=np.int64)

    @property
    def trigger_offsets(self) -> np.ndarray:
        sizes = [t.size for _, t in self.attachments]
        return self.base_nodes + np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64) if sizes else np.zeros(0, np.int64)

    @property
    def trigger_nodes(self) -> np.ndarray:
        return np.arange(self.base_nodes, self.num_nodes, dtype=np.int64)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        base = _base_adjacency(self.base).tocoo()
        n = self.num_nodes
        rows = [base.row]
        cols = [base.col]
        vals = [base.data]
        for (anchor, trig), off in zip(self.attachments, self.trigger_offsets):
            r, c = np.nonzero(trig.adjacency)
            rows += [r + off, np.array([anchor, off])]
            cols += [c + off, np.array([off, anchor])]
            vals += [np.ones(len(r)), np.ones(2)]
        adj = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )
        adj.sort_indices()
        return adj

    @cached_property
    def features(self) -> np.ndarray:
        blocks = [np.asarray(self.base.features)] + [t.features for _, t in self.attachments]
        return np.vstack(blocks)

    @cached_property
    def features_csr(self) -> sp.csr_matrix:
        base = getattr(self.base, "features_csr", None)
        base = base if base is not None else sp.csr_matrix(np.asarray(self.base.features))
        extra = [sp.csr_matrix(t.features) for _, t in self.attachments]
        return sp.vstack([base] + extra, format="csr")

    @property
    def labels(self) -> np.ndarray:
        if self.labels_override is not None:
            return self.labels_override
        extra = np.full(self.num_nodes - self.base_nodes, -1, dtype=np.int64)
        return np.concatenate([np.asarray(self.base.labels), extra])

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    matrix: sp.csr_matrix
    provenance: str

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other


def normalize_adjacency(g) -> NormalizedAdjacency:
    """Renormalized propagation operator ``D^-1/2 (A + I) D^-1/2`` with ``D = deg(A + I)``."""
    adj = g if sp.issparse(g) or isinstance(g, np.ndarray) else g.adjacency
    return NormalizedAdjacency(_normalize(adj), provenance=str(getattr(g, "name", type(g).__name__)))


def _normalize(adj) -> sp.csr_matrix:
    a = sp.csr_matrix(adj, dtype=np.float64)
    a = a + sp.identity(a.shape[0], format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    out = sp.csr_matrix(d @ a @ d)
    out.sort_indices()
    return out


def attach_trigger(base, anchor: int, t: Trigger) -> AugmentedGraph:
    n = base.num_nodes
    if not 0 <= anchor < n:
        raise NodeOutOfRange(f"anchor {anchor} outside [0, {n})")
    if isinstance(base, AugmentedGraph):
        return AugmentedGraph(base.base, base.attachments + ((int(anchor), t),))
    return AugmentedGraph(base, ((int(anchor), t),))


def attach_triggers(base, anchors, triggers, labels=None, train=None) -> AugmentedGraph:
    anchors = [int(a) for a in anchors]
    n = base.num_nodes
    for a in anchors:
        if not 0 <= a < n:
            raise NodeOutOfRange(f"anchor {a} outside [0, {n})")
    return AugmentedGraph(base, tuple(zip(anchors, triggers)), labels, train)


def subsample_edges(g, keep_prob: float, seed: int):
    """Keep each undirected edge independently with probability ``keep_prob``."""
    if not 0.0 <= keep_prob <= 1.0:
        raise InvalidParams("keep_prob must lie in [0, 1]")
    adj = sp.csr_matrix(g.adjacency)
    upper = sp.triu(adj, k=1).tocoo()
    rng = np.random.default_rng(seed)
    keep = rng.random(upper.nnz) < keep_prob
    kept = sp.coo_matrix((upper.data[keep], (upper.row[keep], upper.col[keep])), shape=adj.shape)
    new = sp.csr_matrix(kept + kept.T)
    new.sort_indices()
    return g.with_adjacency(new) if hasattr(g, "with_adjacency") else new


def _stratified_split(labels: np.ndarray, fractions, rng) -> list[np.ndarray]:
    parts = [[] for _ in fractions]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        bounds = np.round(np.cumsum(fractions) * len(idx)).astype(int)
        start = 0
        for i, stop in enumerate(bounds):
            parts[i].append(idx[start:stop])
            start = stop
    return [np.sort(np.concatenate(p)) for p in parts]


def generate_sbm_graph(
    num_nodes: int, classes: int, d: int, p_in: float, p_out: float, seed: int
) -> NodeGraph:
    """Stochastic block model with class-conditional Gaussian features."""
    if classes < 2:
        raise InvalidParams("need at least two classes")
    if not 0.0 <= p_out < p_in <= 1.0:
        raise InvalidParams("require 0 <= p_out < p_in <= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(num_nodes) % classes)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draw = rng.random((num_nodes, num_nodes))
    upper = np.triu(draw < prob, k=1)
    rows, cols = np.nonzero(upper)
    feats = rng.standard_normal((num_nodes, d))
    feats[np.arange(num_nodes), labels % d] += 1.0
    train, val, test = _stratified_split(labels, (0.1, 0.2, 0.7), rng)
    return NodeGraph(
        adjacency=_symmetric_binary(rows, cols, num_nodes),
        features=feats,
        labels=labels.astype(np.int64),
        num_classes=classes,
        train=train,
        val=val,
        test=test,
        name=f"sbm-{num_nodes}-{classes}-{seed}",
    )


def load_graph_bundle(path) -> NodeGraph:
    path = Path(path)
    missing = [f for f in BUNDLE_FILES if not (path / f).is_file()]
    if missing:
        raise BundleIncomplete(f"{path}: missing {', '.join(missing)}")
    meta = json.loads((path / "meta.json").read_text())
    try:
        n, d, c = int(meta["num_nodes"]), int(meta["num_features"]), int(meta["num_classes"])
    except KeyError as e:
        raise BundleCorrupt(f"meta.json lacks {e}") from None
    raw = np.fromfile(path / "features.f32", dtype="<f4")
    if d == 0 or raw.size % max(d, 1) or raw.size // d != n:
        raise BundleCorrupt(f"features.f32 holds {raw.size} floats, expected {n}x{d}")
    features = raw.reshape(n, d).astype(np.float64)
    text = (path / "edges.tsv").read_text().split()
    edges = np.array(text, dtype=np.int64).reshape(-1, 2) if text else np.zeros((0, 2), np.int64)
    if len(edges) and (edges.min() < 0 or edges.max() >= n):
        raise BundleCorrupt("edge endpoint out of range")
    labels = np.array((path / "labels.txt").read_text().split(), dtype=np.int64)
    if labels.shape != (n,):
        raise BundleCorrupt(f"labels.txt has {labels.size} entries, expected {n}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise BundleCorrupt("label out of range")
    splits = json.loads((path / "splits.json").read_text())
    return NodeGraph(
        adjacency=_symmetric_binary(edges[:, 0], edges[:, 1], n),
        features=features,
        labels=labels,
        num_classes=c,
        train=np.asarray(splits.get("train", []), dtype=np.int64),
        val=np.asarray(splits.get("val", []), dtype=np.int64),
        test=np.asarray(splits.get("test", []), dtype=np.int64),
        name=str(meta.get("name", path.name)),
    )


def save_graph_bundle(g: NodeGraph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"num_nodes": g.num_nodes, "num_features": g.num_features, "num_classes": g.num_classes, "name": g.name}
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    g.features.astype("<f4").tofile(path / "features.f32")
    edges = edge_list(g.adjacency)
    (path / "edges.tsv").write_text("".join(f"{s}\t{t}\n" for s, t in edges))
    (path / "labels.txt").write_text("".join(f"{y}\n" for y in g.labels))
    splits = {k: [int(i) for i in getattr(g, k)] for k in ("train", "val", "test")}
    (path / "splits.json").write_text(json.dumps(splits) + "\n")
    return path
