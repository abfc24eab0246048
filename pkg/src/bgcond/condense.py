"""Gradient-matching graph condensation (DC-Graph, GCond, GCond-X).

The condensation backbone is a linear SGC surrogate ``logits = Â^k X W``.
Its weight gradient has a closed form, so the synthetic-side gradient is
written as an ordinary recorded expression of the synthetic features and the
matching loss becomes a first-order quantity for the tape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import EmptyMask, InvalidParams, SecondOrderUnsupported, StructureModeMismatch
from .graph import NormalizedAdjacency, normalize_adjacency
from .models import Adam, ModelSpec, init_params

METHODS = ("GCond", "GCond-X", "DC-Graph")


# --- structure --------------------------------------------------------------


@dataclass(eq=False)
class IdentityStructure:
    """No synthetic edges: propagation reduces to the identity."""

    kind = "identity"


@dataclass(eq=False)
class PairwiseStructure:
    """Learned edge generator ``A'_ij = sigmoid(mean(MLP([x_i;x_j]), MLP([x_j;x_i])))``."""

    params: list  # W1 [2d, h], b1 [1, h], W2 [h, 1], b2 [1, 1]
    threshold: float = 0.5
    kind = "pairwise"

    @classmethod
    def init(cls, d: int, hidden: int, threshold: float, rng) -> "PairwiseStructure":
        b1 = np.sqrt(6.0 / (2 * d + hidden))
        b2 = np.sqrt(6.0 / (hidden + 1))
        return cls(
            [
                rng.uniform(-b1, b1, (2 * d, hidden)),
                np.zeros((1, hidden)),
                rng.uniform(-b2, b2, (hidden, 1)),
                np.zeros((1, 1)),
            ],
            threshold,
        )


@dataclass(eq=False)
class FixedStructure:
    """A frozen weighted adjacency (e.g. after a defense edited the graph)."""

    dense: np.ndarray
    kind = "fixed"


def generate_structure(phi, X, threshold: float | None = None):
    """Symmetric zero-diagonal ``A'`` in ``[0, 1]`` from pairwise features.

    ``phi`` is a :class:`PairwiseStructure` or its parameter list; tensors in
    either argument are differentiated through.
    """
    if isinstance(phi, (IdentityStructure, FixedStructure)):
        raise StructureModeMismatch("structure generation only exists in GCond mode")
    if isinstance(phi, PairwiseStructure):
        threshold = phi.threshold if threshold is None else threshold
        phi = phi.params
    threshold = 0.5 if threshold is None else threshold
    W1, b1, W2, b2 = phi
    n, d = ad._data(X).shape
    W1d = ad._data(W1)
    if W1d.shape[0] != 2 * d:
        raise InvalidParams("structure generator input width must be 2d")
    top = ad.take_rows(W1, np.arange(d)) if isinstance(W1, ad.Tensor) else W1d[:d]
    bot = ad.take_rows(W1, np.arange(d, 2 * d)) if isinstance(W1, ad.Tensor) else W1d[d:]
    P = ad.matmul(X, top)
    Q = ad.matmul(X, bot)
    ii = np.repeat(np.arange(n), n)
    jj = np.tile(np.arange(n), n)
    hidden = ad.relu(ad.add(ad.add(ad.take_rows(P, ii), ad.take_rows(Q, jj)), b1))
    logits = ad.reshape(ad.add(ad.matmul(hidden, W2), b2), (n, n))
    sym = ad.scale(ad.add(logits, ad.transpose(logits)), 0.5)
    A = ad.sigmoid(sym)
    keep = (A.data >= threshold) & ~np.eye(n, dtype=bool)
    return ad.mul(A, keep.astype(np.float64))


# --- synthetic graph --------------------------------------------------------


@dataclass(eq=False)
class SyntheticGraph:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    structure: object = field(default_factory=IdentityStructure)
    ratio: float = 0.0
    trace: list = field(default_factory=list)
    name: str = "synthetic"

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def train(self) -> np.ndarray:
        return np.arange(self.num_nodes)

    def dense_adjacency(self) -> np.ndarray:
        s = self.structure
        if isinstance(s, IdentityStructure):
            return np.zeros((self.num_nodes, self.num_nodes))
        if isinstance(s, FixedStructure):
            return s.dense
        return generate_structure(s, self.features).data

    @property
    def adjacency(self) -> sp.csr_matrix:
        a = sp.csr_matrix(self.dense_adjacency())
        a.eliminate_zeros()
        a.sort_indices()
        return a

    def propagation(self) -> NormalizedAdjacency:
        return NormalizedAdjacency(_sparse_normalize_weighted(self.dense_adjacency()), self.name)

    def with_adjacency(self, adjacency) -> "SyntheticGraph":
        dense = adjacency.toarray() if sp.issparse(adjacency) else np.asarray(adjacency, dtype=np.float64)
        return replace(self, structure=FixedStructure(dense), trace=list(self.trace))

    def copy(self) -> "SyntheticGraph":
        s = self.structure
        if isinstance(s, PairwiseStructure):
            s = PairwiseStructure([p.copy() for p in s.params], s.threshold)
        elif isinstance(s, FixedStructure):
            s = FixedStructure(s.dense.copy())
        return replace(self, features=self.features.copy(), structure=s, trace=list(self.trace))


def _sparse_normalize_weighted(dense: np.ndarray) -> sp.csr_matrix:
    m = dense + np.eye(dense.shape[0])
    s = 1.0 / np.sqrt(m.sum(axis=1))
    out = sp.csr_matrix(m * s[:, None] * s[None, :])
    out.sort_indices()
    return out


def synthetic_size(num_base: int, num_classes: int, ratio: float) -> int:
    return max(num_classes, int(round(ratio * num_base)))


def class_allocation(train_labels: np.ndarray, num_classes: int, n_syn: int) -> np.ndarray:
    """Class-proportional node counts for ``n_syn`` synthetic nodes, at least one per present class."""
    counts = np.bincount(train_labels, minlength=num_classes).astype(np.float64)
    present = counts > 0
    quota = counts / counts.sum() * n_syn
    alloc = np.where(present, np.maximum(1, np.floor(quota)), 0).astype(np.int64)
    # largest remainders first, ties to the lower class id
    while alloc.sum() < n_syn:
        rem = np.where(present, quota - alloc, -np.inf)
        alloc[int(np.argmax(rem))] += 1
    while alloc.sum() > n_syn:
        over = np.where(alloc > 1, alloc - quota, -np.inf)
        alloc[int(np.argmax(over))] -= 1
    return alloc


def init_synthetic(g, r: float, seed: int, *, ratio_base: str = "nodes", method: str = "GCond",
                   threshold: float = 0.5, structure_hidden: int = 128) -> SyntheticGraph:
    """Class-proportional labels; features sampled from same-class training rows."""
    train = np.asarray(g.train)
    if train.size == 0:
        raise EmptyMask("graph has no training nodes")
    if not 0 < r <= 1:
        raise InvalidParams("ratio must be in (0, 1]")
    base = g.num_nodes if ratio_base == "nodes" else len(train)
    n_syn = synthetic_size(base, g.num_classes, r)
    y_train = np.asarray(g.labels)[train]
    alloc = class_allocation(y_train, g.num_classes, n_syn)
    rng = np.random.default_rng([seed, 0])
    labels, rows = [], []
    for c in range(g.num_classes):
        if alloc[c] == 0:
            continue
        pool = train[y_train == c]
        pick = rng.choice(pool, size=alloc[c], replace=alloc[c] > len(pool))
        labels.append(np.full(alloc[c], c, dtype=np.int64))
        rows.append(pick)
    rows = np.concatenate(rows)
    X = np.asarray(g.features)[rows].astype(np.float64)
    structure = (
        PairwiseStructure.init(X.shape[1], structure_hidden, threshold, rng) if method == "GCond" else IdentityStructure()
    )
    S = SyntheticGraph(X, np.concatenate(labels), g.num_classes, structure, r, name=f"{getattr(g, 'name', 'g')}-syn")
    S.source_rows = rows
    return S


# --- matching ---------------------------------------------------------------


@dataclass
class CondensationConfig:
    method: str = "GCond"
    ratio: float = 0.026
    epochs: int = 1000
    lr_features: float = 0.01
    lr_structure: float = 0.001
    T: int = 10
    M: int = 1
    lr_surrogate: float = 0.01
    k: int = 2
    threshold: float = 0.5
    structure_hidden: int = 128
    ratio_base: str = "nodes"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParams(f"unknown condensation method {self.method!r}")
        if not 0 < self.ratio <= 1:
            raise InvalidParams("ratio must be in (0, 1]")
        if self.epochs < 1:
            raise InvalidParams("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidParams("optimizer must be 'adam' or 'sgd'")
        if self.ratio_base not in ("nodes", "train"):
            raise InvalidParams("ratio_base must be 'nodes' or 'train'")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def propagate_k(adj, X, k: int) -> np.ndarray:
    """``Â^k X`` for a constant operator."""
    m = adj.matrix if isinstance(adj, NormalizedAdjacency) else adj
    if sp.issparse(X):
        # sparse-sparse products stay cheap for bag-of-words features
        h = sp.csr_matrix(X, dtype=np.float64)
        for _ in range(k):
            h = m @ h
        return h.toarray()
    h = np.asarray(X, dtype=np.float64)
    for _ in range(k):
        h = np.asarray(m @ h)
    return h


def class_masks(labels, mask, num_classes):
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=np.int64)
    return [mask[labels[mask] == c] for c in range(num_classes)]


def source_gradients(Z: np.ndarray, W: np.ndarray, labels, masks) -> list:
    """Per-class closed-form SGC gradients on the source side (``None`` for absent classes)."""
    C = W.shape[1]
    out = []
    for m in masks:
        if len(m) == 0:
            out.append(None)
        else:
            out.append(ad.sgc_weight_gradient(Z[m], W, _onehot(np.asarray(labels)[m], C)))
    return out


def _onehot(y, C):
    out = np.zeros((len(y), C))
    out[np.arange(len(y)), y] = 1.0
    return out


def matching_distance(syn_grads, src_grads, C: int):
    """Σ_c D(syn_c, src_c); a class present on one side only adds ``C`` (1 per column)."""
    total = None
    missing = 0.0
    for gs, gt in zip(syn_grads, src_grads):
        if gs is None and gt is None:
            continue
        if gs is None or gt is None:
            missing += float(C)
            continue
        term = ad.column_cosine_distance_sum(gs, gt)
        total = term if total is None else ad.add(total, term)
    if total is None:
        return ad.Tensor([[missing]])
    return ad.add(total, missing) if missing else total


def synthetic_propagation(S: SyntheticGraph, method: str, k: int, X=None, phi=None):
    """``Â'^k X'`` as a recorded expression (identity structure skips propagation)."""
    X = S.features if X is None else X
    if method != "GCond":
        return X
    if isinstance(S.structure, FixedStructure):
        A = S.structure.dense
    else:
        A = generate_structure(S.structure.params if phi is None else phi, X, S.structure.threshold)
    norm = ad.sym_normalize_dense(A)
    h = X
    for _ in range(k):
        h = ad.matmul(norm, h)
    return h


def matching_loss(S: SyntheticGraph, source, theta, masks=None, *, method: str = "GCond", k: int = 2,
                  source_Z=None, source_labels=None, X=None, phi=None):
    """Class-wise gradient-matching loss between ``S`` and a source graph at weights ``theta``."""
    W = ad._data(theta.weights[0] if hasattr(theta, "weights") else theta)
    C = W.shape[1]
    if source_Z is None:
        source_Z = source_features(source, method, k)
    if source_labels is None:
        source_labels = np.asarray(source.labels)
    if masks is None:
        masks = class_masks(source_labels, source.train, C)
    src = source_gradients(source_Z, W, source_labels, masks)
    Z_syn = synthetic_propagation(S, method, k, X=X, phi=phi)
    syn = []
    for c in range(C):
        idx = np.flatnonzero(S.labels == c)
        syn.append(ad.sgc_weight_gradient(Z_syn, W, _onehot(S.labels, C), idx) if len(idx) else None)
    return matching_distance(syn, src, C)


def source_features(source, method: str, k: int) -> np.ndarray:
    """Propagated source features: the true ``Â^k X`` except for DC-Graph (identity)."""
    X = np.asarray(source.features)
    if method == "DC-Graph":
        return X
    csr = getattr(source, "features_csr", None)
    return propagate_k(normalize_adjacency(source), csr if csr is not None else X, k)


def matching_grad_wrt_features(S: SyntheticGraph, G_P, theta, *, method: str = "GCond", k: int = 2,
                               surrogate: str = "SGC", source_Z=None, source_labels=None, masks=None):
    """``∂ matching_loss / ∂X'`` with the source gradient held constant."""
    if surrogate != "SGC":
        raise SecondOrderUnsupported("only the linear SGC surrogate has an analytic second-order path")
    tape = ad.Tape()
    X = tape.variable(S.features)
    phi = None
    if method == "GCond" and isinstance(S.structure, PairwiseStructure):
        phi = [tape.variable(p) for p in S.structure.params]
    loss = matching_loss(S, G_P, theta, masks, method=method, k=k, source_Z=source_Z,
                         source_labels=source_labels, X=X, phi=phi)
    ad.backward(loss)
    return X.grad if X.grad is not None else np.zeros_like(S.features)


# --- condensation loop ------------------------------------------------------


def train_surrogate(S: SyntheticGraph, cfg: CondensationConfig, seed) -> np.ndarray:
    """Fresh SGC weights trained ``T`` Adam steps on the synthetic graph."""
    W = init_params(ModelSpec("SGC", k=cfg.k), S.num_features, S.num_classes, seed).weights[0]
    if cfg.method == "GCond":
        Z = propagate_k(S.propagation(), S.features, cfg.k)
    else:
        Z = S.features
    Y = _onehot(S.labels, S.num_classes)
    opt = Adam([W], lr=cfg.lr_surrogate)
    for _ in range(cfg.T):
        opt.step([ad.sgc_weight_gradient(Z, W, Y)])
    return W


class _SyntheticOptimizer:
    def __init__(self, S: SyntheticGraph, cfg: CondensationConfig):
        self.S = S
        self.cfg = cfg
        make = (lambda ps, lr: Adam(ps, lr=lr)) if cfg.optimizer == "adam" else (lambda ps, lr: _SGD(ps, lr))
        self.feat_opt = make([S.features], cfg.lr_features)
        self.pge_opt = make(S.structure.params, cfg.lr_structure) if isinstance(S.structure, PairwiseStructure) else None

    def step(self, source_Z, source_labels, masks, W) -> float:
        S, cfg = self.S, self.cfg
        tape = ad.Tape()
        X = tape.variable(S.features)
        phi = [tape.variable(p) for p in S.structure.params] if self.pge_opt is not None else None
        loss = matching_loss(S, None, W, masks, method=cfg.method, k=cfg.k, source_Z=source_Z,
                             source_labels=source_labels, X=X, phi=phi)
        ad.backward(loss)
        self.feat_opt.step([X.grad])
        if phi is not None:
            self.pge_opt.step([p.grad for p in phi])
        return loss.item()


class _SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p -= self.lr * g


def condense_clean(g, config: CondensationConfig, *, callback=None) -> SyntheticGraph:
    """Bi-level condensation of ``g``; ``S.trace`` holds the per-epoch matching loss."""
    cfg = config
    S = init_synthetic(g, cfg.ratio, cfg.seed, ratio_base=cfg.ratio_base, method=cfg.method,
                       threshold=cfg.threshold, structure_hidden=cfg.structure_hidden)
    source_Z = source_features(g, cfg.method, cfg.k)
    labels = np.asarray(g.labels)
    masks = class_masks(labels, g.train, g.num_classes)
    opt = _SyntheticOptimizer(S, cfg)
    trace = []
    for epoch in range(cfg.epochs):
        W = train_surrogate(S, cfg, [cfg.seed, 1, epoch])
        loss = opt.step(source_Z, labels, masks, W)
        trace.append({"epoch": epoch, "matching_loss": loss})
        if callback is not None:
            callback(epoch, S)
    S.trace = trace
    return S


# --- persistence ------------------------------------------------------------


def save_synthetic(S: SyntheticGraph, path) -> Path:
    """Bundle-like directory: float64 features, labels, dense structure and generator params."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_nodes": S.num_nodes,
        "num_features": S.num_features,
        "num_classes": S.num_classes,
        "ratio": S.ratio,
        "structure": S.structure.kind,
        "name": S.name,
    }
    if isinstance(S.structure, PairwiseStructure):
        meta["threshold"] = S.structure.threshold
        meta["structure_shapes"] = [list(p.shape) for p in S.structure.params]
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    S.features.astype("<f8").tofile(path / "features.f64")
    (path / "labels.txt").write_text("".join(f"{y}\n" for y in S.labels))
    S.dense_adjacency().astype("<f8").tofile(path / "adjacency.f64")
    if isinstance(S.structure, PairwiseStructure):
        with open(path / "structure.bin", "wb") as fh:
            for p in S.structure.params:
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    (path / "trace.json").write_text(json.dumps(S.trace) + "\n")
    return path


def load_synthetic(path) -> SyntheticGraph:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    n, d = meta["num_nodes"], meta["num_features"]
    X = np.fromfile(path / "features.f64", dtype="<f8").reshape(n, d)
    labels = np.array((path / "labels.txt").read_text().split(), dtype=np.int64)
    kind = meta["structure"]
    if kind == "pairwise":
        flat = np.fromfile(path / "structure.bin", dtype="<f8")
        params, off = [], 0
        for shape in meta["structure_shapes"]:
            size = int(np.prod(shape))
            params.append(flat[off : off + size].reshape(shape))
            off += size
        structure = PairwiseStructure(params, meta["threshold"])
    elif kind == "fixed":
        structure = FixedStructure(np.fromfile(path / "adjacency.f64", dtype="<f8").reshape(n, n))
    else:
        structure = IdentityStructure()
    trace = json.loads((path / "trace.json").read_text()) if (path / "trace.json").exists() else []
    return SyntheticGraph(X, labels, meta["num_classes"], structure, meta["ratio"], trace, meta.get("name", "synthetic"))
