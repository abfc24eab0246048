"""SGC, GCN and MLP node classifiers on top of the tape engine."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import AdjacencyRequired, EmptyMask, InvalidParams
from .graph import NormalizedAdjacency, normalize_adjacency

KINDS = ("SGC", "GCN", "MLP")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "GCN"
    layers: int = 2
    hidden: int = 256
    k: int = 2
    dropout: float = 0.5
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParams(f"unknown model kind {self.kind!r}")
        if self.layers < 1 or self.hidden < 1 or self.k < 0:
            raise InvalidParams("layers and hidden must be >= 1, k >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidParams("dropout must be in [0, 1)")

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(**d)

    def shapes(self, d: int, C: int) -> list[tuple[int, int]]:
        if self.kind == "SGC":
            return [(d, C)]
        dims = [d] + [self.hidden] * (self.layers - 1) + [C]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray] = field(default_factory=list)
    seed: int = 0

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)


def init_params(spec: ModelSpec, d: int, C: int, seed: int) -> ModelParams:
    """Uniform Glorot initialization, zero biases."""
    rng = np.random.default_rng(seed)
    weights = []
    for fan_in, fan_out in spec.shapes(d, C):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    biases = []
    if spec.bias and spec.kind != "SGC":
        biases = [np.zeros((1, w.shape[1])) for w in weights]
    return ModelParams(weights, biases, seed)


def _per_layer(adjacency, count):
    if isinstance(adjacency, (list, tuple)):
        if len(adjacency) != count:
            raise InvalidParams(f"need {count} per-layer adjacencies, got {len(adjacency)}")
        return list(adjacency)
    return [adjacency] * count


def _propagate(adj, h):
    if isinstance(adj, NormalizedAdjacency):
        return ad.sparse_dense_matmul(adj.matrix, h)
    if sp.issparse(adj):
        return ad.sparse_dense_matmul(adj, h)
    return ad.matmul(adj, h)


def _first_product(X, W):
    if sp.issparse(X):
        return ad.sparse_dense_matmul(X, W)
    return ad.matmul(X, W)


def forward(spec: ModelSpec, params, adjacency, X, *, training: bool = False, rng=None, return_hidden: bool = False):
    """Logits ``[n, C]``.

    ``params`` holds arrays or recorded tensors (same layout as
    :class:`ModelParams`).  ``adjacency`` is a propagation operator, or a list
    with one operator per propagation step (used by randomized smoothing).
    """
    weights = params.weights
    biases = params.biases
    if spec.kind == "MLP":
        adjs = [None] * len(weights)
    else:
        if adjacency is None:
            raise AdjacencyRequired(f"{spec.kind} needs an adjacency")
        adjs = _per_layer(adjacency, spec.k if spec.kind == "SGC" else len(weights))
    if spec.kind == "SGC":
        h = X
        if sp.issparse(h):
            h = ad.Tensor(h.toarray())
        for a in adjs:
            h = _propagate(a, h)
        out = ad.matmul(h, weights[0])
        return (out, h) if return_hidden else out
    h = X
    last = len(weights) - 1
    hidden = None
    for i, W in enumerate(weights):
        h = _first_product(h, W) if i == 0 else ad.matmul(h, W)
        if adjs[i] is not None:
            h = _propagate(adjs[i], h)
        if biases:
            h = ad.add(h, biases[i])
        if i < last:
            h = ad.relu(h)
            hidden = h
            if training and spec.dropout > 0:
                keep = 1.0 - spec.dropout
                mask = (rng.random(h.shape) < keep) / keep
                h = ad.mul(h, mask)
    return (h, hidden) if return_hidden else h


class Adam:
    """Adam with coupled L2 weight decay (added to the gradient)."""

    def __init__(self, params: Sequence[np.ndarray], lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}


def operator_for(graph):
    """Propagation operator of any graph-like object."""
    op = getattr(graph, "propagation", None)
    if op is not None:
        return op() if callable(op) else op
    return normalize_adjacency(graph)


def _features_for(graph):
    csr = getattr(graph, "features_csr", None)
    if csr is not None and csr.nnz < 0.2 * np.prod(csr.shape):
        return csr
    return np.asarray(graph.features)


def train(
    spec: ModelSpec,
    graph,
    mask,
    lr: float = 0.01,
    epochs: int = 200,
    weight_decay: float = 5e-4,
    seed: int = 0,
    *,
    adjacency=None,
    labels=None,
    init: ModelParams | None = None,
) -> ModelParams:
    """Full-batch Adam on mean cross-entropy over ``mask``."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMask("training mask is empty")
    y = np.asarray(graph.labels if labels is None else labels)[mask]
    adj = None if spec.kind == "MLP" else (adjacency if adjacency is not None else operator_for(graph))
    X = _features_for(graph)
    d = X.shape[1]
    params = init.copy() if init is not None else init_params(spec, d, graph.num_classes, seed)
    if epochs <= 0:
        return params
    rng = np.random.default_rng([seed, 1])
    if spec.kind == "SGC":
        # propagation is parameter-free: precompute it once
        h = X.toarray() if sp.issparse(X) else X
        for a in _per_layer(adj, spec.k):
            h = np.asarray(_propagate(a, ad.Tensor(h)).data)
        X, adj, spec_run = h[mask], None, spec
        y_run = y
        sub_mask = None
    else:
        spec_run, y_run, sub_mask = spec, y, mask
    opt = Adam(params.arrays(), lr=lr, weight_decay=weight_decay)
    nw = len(params.weights)
    for _ in range(epochs):
        tape = ad.Tape()
        leaves = [tape.variable(p) for p in params.arrays()]
        p_t = ModelParams(leaves[:nw], leaves[nw:])
        if spec_run.kind == "SGC":
            logits = ad.matmul(X, p_t.weights[0])
        else:
            logits = forward(spec_run, p_t, adj, X, training=True, rng=rng)
            logits = ad.take_rows(logits, sub_mask)
        loss = ad.cross_entropy_mean(logits, y_run)
        ad.backward(loss)
        opt.step([leaf.grad for leaf in leaves])
    return params


def predict_logits(spec: ModelSpec, params: ModelParams, graph, adjacency=None) -> np.ndarray:
    adj = None if spec.kind == "MLP" else (adjacency if adjacency is not None else operator_for(graph))
    return forward(spec, params, adj, _features_for(graph)).data


def evaluate_accuracy(params: ModelParams, spec: ModelSpec, graph, mask, adjacency=None, logits=None) -> float:
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise EmptyMask("evaluation mask is empty")
    if logits is None:
        logits = predict_logits(spec, params, graph, adjacency)
    pred = np.argmax(logits[mask], axis=1)
    return float(np.mean(pred == np.asarray(graph.labels)[mask]))


def save_params(params: ModelParams, spec: ModelSpec, path, extra: dict | None = None) -> Path:
    """Raw little-endian float64 blob plus a JSON sidecar with shapes, spec and seed."""
    path = Path(path)
    arrays = params.arrays()
    with open(path.with_suffix(".bin"), "wb") as fh:
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    sidecar = {
        "spec": asdict(spec),
        "seed": int(params.seed),
        "n_weights": len(params.weights),
        "shapes": [list(a.shape) for a in arrays],
    }
    if extra:
        sidecar.update(extra)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return path.with_suffix(".bin")


def load_params(path) -> tuple[ModelParams, ModelSpec, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    arrays, off = [], 0
    for shape in sidecar["shapes"]:
        size = int(np.prod(shape))
        arrays.append(flat[off : off + size].reshape(shape).astype(np.float64))
        off += size
    nw = sidecar["n_weights"]
    params = ModelParams(arrays[:nw], arrays[nw:], sidecar["seed"])
    return params, ModelSpec.from_dict(sidecar["spec"]), sidecar
