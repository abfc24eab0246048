"""Backdoor attack on gradient-matching condensation.

Poisoned nodes are chosen once from a GCN selector's embeddings.  An adaptive
trigger generator is then optimized jointly with the synthetic graph: every
outer epoch re-trains a fresh surrogate on the synthetic graph, takes
generator steps against it, re-attaches freshly generated triggers to the
poisoned nodes and finally takes one matching step towards the poisoned graph.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .cluster import kmeans
from .condense import (
    CondensationConfig,
    _SyntheticOptimizer,
    class_masks,
    init_synthetic,
    source_features,
    train_surrogate,
)
from .errors import EmptyMask, InvalidParams, NodeOutOfRange, NothingToPoison, TooFewPoints
from .graph import Trigger, attach_triggers, normalize_adjacency
from .models import Adam, ModelParams, ModelSpec, forward, init_params, train


@dataclass
class AttackBudget:
    poison_ratio: float = 0.1
    poison_count: int | None = None
    trigger_size: int = 4
    degree_weight: float = 1.0
    clusters: int = 1
    target_class: int = 0
    update_size: int | None = None
    directed: bool = False
    source_class: int | None = None
    selection: str = "score"
    score_sign: int = 1
    full_connectivity: bool = False
    generator: str = "GCN"
    generator_hidden: int = 128
    lr_generator: float = 0.01
    generator_weight_decay: float = 5e-4
    bound_features: bool = True
    feature_mass_scale: float | None = 1.0
    selector_hidden: int = 128
    selector_epochs: int = 200

    def __post_init__(self):
        if self.trigger_size < 1:
            raise InvalidParams("trigger size must be >= 1")
        if self.clusters < 1:
            raise InvalidParams("need at least one cluster per class")
        if self.selection not in ("score", "random"):
            raise InvalidParams("selection must be 'score' or 'random'")
        if self.score_sign not in (1, -1):
            raise InvalidParams("score_sign must be +1 or -1")
        if self.generator not in ("GCN", "MLP"):
            raise InvalidParams("generator encoder must be GCN or MLP")
        if self.directed and self.source_class is None:
            raise InvalidParams("directed mode needs a source class")
        if self.feature_mass_scale is not None and not self.feature_mass_scale > 0:
            raise InvalidParams("feature_mass_scale must be positive or None")

    def poison_budget(self, g) -> int:
        if self.poison_count is not None:
            return int(self.poison_count)
        return int(round(self.poison_ratio * len(g.train)))

    def validate(self, g):
        if not 0 <= self.target_class < g.num_classes:
            raise InvalidParams(f"target class {self.target_class} outside [0, {g.num_classes})")
        if self.directed and not 0 <= self.source_class < g.num_classes:
            raise InvalidParams("source class out of range")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- poisoned node selection -----------------------------------------------


@dataclass
class PoisonSelection:
    nodes: np.ndarray
    candidates: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clusters: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    centroids: dict = field(default_factory=dict)
    per_cluster: int = 0
    selector: ModelParams | None = None
    embeddings: np.ndarray | None = None


def train_selector(g, seed=0, hidden: int = 128, epochs: int = 200):
    """2-layer GCN on the train split; returns ``(params, spec, H_sel)`` with ``H_sel`` the hidden layer."""
    if len(g.train) == 0:
        raise EmptyMask("graph has no training nodes")
    spec = ModelSpec("GCN", layers=2, hidden=hidden)
    params = train(spec, g, g.train, epochs=epochs, seed=seed)
    _, H = forward(spec, params, normalize_adjacency(g), g.features_csr, return_hidden=True)
    return params, spec, H.data


def score_nodes(H_sel, nodes, assign, centroids, degrees, lam: float) -> np.ndarray:
    """``‖h_v - centroid(v)‖₂ + λ·deg(v)`` for each node (degree without self-loop)."""
    H = np.asarray(H_sel)[np.asarray(nodes)]
    dist = np.sqrt(((H - np.asarray(centroids)[np.asarray(assign)]) ** 2).sum(axis=1))
    return dist + lam * np.asarray(degrees)[np.asarray(nodes)]


TIE_DECIMALS = 10


def _rank(nodes, scores, sign):
    # highest signed score first, ties to the lower node id; scores equal to
    # TIE_DECIMALS places count as ties so rounding noise cannot reorder them
    order = np.lexsort((nodes, -sign * np.round(scores, TIE_DECIMALS)))
    return nodes[order]


def select_poison_nodes(g, budget: AttackBudget, seed=0, *, embeddings=None) -> PoisonSelection:
    budget.validate(g)
    delta_p = budget.poison_budget(g)
    y_t = budget.target_class
    train_nodes = np.asarray(g.train)
    y = np.asarray(g.labels)
    if budget.directed:
        classes = [budget.source_class]
    else:
        classes = [c for c in range(g.num_classes) if c != y_t]
    candidates = np.sort(train_nodes[np.isin(y[train_nodes], classes) & (y[train_nodes] != y_t)])
    if len(candidates) == 0:
        raise NothingToPoison("no non-target training nodes available")
    if delta_p <= 0:
        return PoisonSelection(np.zeros(0, np.int64), candidates)
    rng = np.random.default_rng([int(np.atleast_1d(seed)[0]) if np.ndim(seed) else seed, 7])
    if budget.selection == "random":
        pick = np.sort(rng.choice(candidates, size=min(delta_p, len(candidates)), replace=False))
        return PoisonSelection(pick, candidates)

    selector, H = None, embeddings
    if H is None:
        selector, _, H = train_selector(g, seed, budget.selector_hidden, budget.selector_epochs)
    degrees = np.asarray(g.adjacency.sum(axis=1)).ravel()
    K = budget.clusters
    n_per = int(delta_p // (len(classes) * K))
    cand_scores = np.zeros(len(candidates))
    cand_cluster = np.zeros(len(candidates), dtype=np.int64)
    centroids = {}
    chosen = []
    for c in classes:
        members = candidates[y[candidates] == c]
        if len(members) == 0:
            continue
        k_eff = min(K, len(members))
        assign, cents = kmeans(H[members], k_eff, seed=[int(np.atleast_1d(seed)[0]), 11, c])
        centroids[c] = cents
        scores = score_nodes(H, members, assign, cents, degrees, budget.degree_weight)
        pos = np.searchsorted(candidates, members)
        cand_scores[pos] = scores
        cand_cluster[pos] = assign
        for k in range(k_eff):
            in_k = members[assign == k]
            ranked = _rank(in_k, scores[assign == k], budget.score_sign)
            chosen.extend(ranked[:n_per].tolist())
    chosen = list(dict.fromkeys(chosen))[:delta_p]
    if len(chosen) < delta_p:
        rest = np.setdiff1d(candidates, chosen)
        rest_scores = cand_scores[np.searchsorted(candidates, rest)]
        chosen.extend(_rank(rest, rest_scores, budget.score_sign)[: delta_p - len(chosen)].tolist())
    return PoisonSelection(
        np.array(sorted(chosen), dtype=np.int64), candidates, cand_scores, cand_cluster, centroids, n_per, selector, H
    )


def sample_update_set(g, size: int, seed, pool=None) -> np.ndarray:
    """Uniform sample without replacement from ``pool`` (all nodes by default)."""
    pool = np.arange(g.num_nodes) if pool is None else np.asarray(pool, dtype=np.int64)
    if size > len(pool):
        raise TooFewPoints(f"cannot sample {size} of {len(pool)} nodes")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=size, replace=False))


# --- trigger generator ------------------------------------------------------


class TriggerGenerator:
    """Encoder (GCN or MLP) followed by linear feature and adjacency heads."""

    def __init__(self, num_features: int, trigger_size: int = 4, encoder: str = "GCN", hidden: int = 128,
                 seed=0, lr: float = 0.01, full_connectivity: bool = False, weight_decay: float = 0.0,
                 feature_range: tuple[float, float] | None = None, feature_mass: float | None = None):
        self.num_features = num_features
        self.trigger_size = trigger_size
        self.encoder_spec = ModelSpec(encoder, layers=2, hidden=hidden, dropout=0.0)
        enc = init_params(self.encoder_spec, num_features, hidden, seed)
        rng = np.random.default_rng([int(np.atleast_1d(seed)[0]), 5])
        g = trigger_size
        bf = np.sqrt(6.0 / (hidden + g * num_features))
        ba = np.sqrt(6.0 / (hidden + g * g))
        self.n_enc_w = len(enc.weights)
        self.params = enc.weights + enc.biases + [
            rng.uniform(-bf, bf, (hidden, g * num_features)),
            rng.uniform(-ba, ba, (hidden, g * g)),
        ]
        self.lr = lr
        self.full_connectivity = full_connectivity
        self.seed = seed
        self.weight_decay = weight_decay
        self.feature_range = None if feature_range is None else (float(feature_range[0]), float(feature_range[1]))
        self.feature_mass = None if feature_mass is None else float(feature_mass)
        self._ones = np.ones((num_features, 1))
        self.opt = Adam(self.params, lr=lr, weight_decay=weight_decay)
        self._op_cache = (None, None)
        perm = np.arange(g * g).reshape(g, g).T.ravel()
        self._transpose_cols = perm
        self._offdiag = (1.0 - np.eye(g)).ravel()[None, :]

    @property
    def hidden(self) -> int:
        return self.encoder_spec.hidden

    def _operator(self, g):
        key, op = self._op_cache
        if key is not g:
            op = normalize_adjacency(g)
            self._op_cache = (g, op)
        return op

    def encode(self, g, params=None):
        p = self.params if params is None else params
        enc = ModelParams(p[: self.n_enc_w], p[self.n_enc_w : 2 * self.n_enc_w])
        adj = None if self.encoder_spec.kind == "MLP" else self._operator(g)
        X = getattr(g, "features_csr", None)
        X = X if X is not None else np.asarray(g.features)
        return forward(self.encoder_spec, enc, adj, X)

    def expressions(self, g, nodes, params=None, relaxed: bool = False):
        """Recorded trigger features ``[m·|g|, d]``, adjacency ``[m, |g|²]`` and symmetric logits."""
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) and (nodes.min() < 0 or nodes.max() >= g.num_nodes):
            raise NodeOutOfRange("trigger requested for a node outside the graph")
        p = self.params if params is None else params
        W_f, W_a = p[-2], p[-1]
        H = ad.take_rows(self.encode(g, p), nodes)
        feats = ad.matmul(H, W_f)
        if self.feature_range is not None:
            lo, hi = self.feature_range
            feats = ad.add(ad.scale(ad.sigmoid(feats), hi - lo), lo)
        feats = ad.reshape(feats, (len(nodes) * self.trigger_size, self.num_features))
        if self.feature_mass is not None:
            # every trigger node carries the feature mass of an average real node
            mass = ad.matmul(feats, self._ones)
            feats = ad.mul(feats, ad.scale(ad.power(mass, -1.0), self.feature_mass))
        raw = ad.matmul(H, W_a)
        sym = ad.scale(ad.add(raw, ad.take_cols(raw, self._transpose_cols)), 0.5)
        prob = ad.sigmoid(sym)
        if self.full_connectivity:
            adj = ad.Tensor(np.repeat(self._offdiag, len(nodes), axis=0))
        else:
            adj = prob if relaxed else ad.straight_through(prob, 0.5)
            adj = ad.mul(adj, self._offdiag)
        return feats, adj, sym

    def triggers(self, g, nodes) -> list[Trigger]:
        feats, adj, sym = self.expressions(g, nodes)
        s = self.trigger_size
        F = feats.data.reshape(len(nodes), s, self.num_features)
        A = adj.data.reshape(len(nodes), s, s)
        L = sym.data.reshape(len(nodes), s, s)
        return [Trigger(F[i], A[i], L[i]) for i in range(len(nodes))]

    def step(self, grads):
        self.opt.step(grads)

    def save(self, path) -> Path:
        path = Path(path)
        with open(path.with_suffix(".bin"), "wb") as fh:
            for a in self.params:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        sidecar = {
            "num_features": self.num_features,
            "trigger_size": self.trigger_size,
            "encoder": self.encoder_spec.kind,
            "hidden": self.hidden,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "feature_range": self.feature_range,
            "feature_mass": self.feature_mass,
            "full_connectivity": self.full_connectivity,
            "seed": [int(s) for s in np.atleast_1d(self.seed)],
            "shapes": [list(a.shape) for a in self.params],
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
        return path.with_suffix(".bin")

    @classmethod
    def load(cls, path) -> "TriggerGenerator":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        gen = cls(meta["num_features"], meta["trigger_size"], meta["encoder"], meta["hidden"],
                  seed=meta["seed"], lr=meta["lr"], full_connectivity=meta["full_connectivity"],
                  weight_decay=meta.get("weight_decay", 0.0), feature_range=meta.get("feature_range"),
                  feature_mass=meta.get("feature_mass"))
        flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        off = 0
        for i, shape in enumerate(meta["shapes"]):
            size = int(np.prod(shape))
            gen.params[i][...] = flat[off : off + size].reshape(shape)
            off += size
        return gen


def feature_range(g) -> tuple[float, float]:
    """Smallest and largest feature value of ``g``."""
    X = getattr(g, "features_csr", None)
    if X is not None:
        lo, hi = X.min(), X.max()
    else:
        lo, hi = np.min(g.features), np.max(g.features)
    return float(lo), float(hi)


def feature_mass(g) -> float | None:
    """Mean row sum of a non-negative feature matrix; ``None`` when some feature is negative."""
    X = getattr(g, "features_csr", None)
    X = X if X is not None else np.asarray(g.features)
    if X.min() < 0:
        return None
    return float(np.asarray(X.sum(axis=1)).mean())


def _trigger_mass(g, budget: AttackBudget) -> float | None:
    if not budget.bound_features or budget.feature_mass_scale is None:
        return None
    mass = feature_mass(g)
    return None if mass is None else mass * budget.feature_mass_scale


def generate_trigger(gen: TriggerGenerator, g, v: int) -> Trigger:
    if not 0 <= v < g.num_nodes:
        raise NodeOutOfRange(f"node {v} outside [0, {g.num_nodes})")
    return gen.triggers(g, [v])[0]


# --- augmented propagation with straight-through trigger edges --------------


class AugmentedOperator:
    """Normalized propagation over ``base + triggers`` with degrees frozen at the forward values.

    The constant part covers base edges, anchor edges and self-loops; the
    trigger-internal part is a fixed-support sparse matrix whose values are
    the (differentiable) trigger adjacency entries times constant
    ``1/sqrt(deg_i deg_j)`` factors.
    """

    def __init__(self, base_adj, anchors, adj_values: np.ndarray, size: int):
        base_adj = sp.csr_matrix(base_adj)
        N = base_adj.shape[0]
        m = len(anchors)
        self.N, self.m, self.size = N, m, size
        n = N + m * size
        self.n = n
        blocks = np.asarray(adj_values).reshape(m, size, size)
        deg = np.zeros(n)
        deg[:N] = np.asarray(base_adj.sum(axis=1)).ravel()
        np.add.at(deg, anchors, 1.0)
        tdeg = blocks.sum(axis=2)
        tdeg[:, 0] += 1.0
        deg[N:] = tdeg.ravel()
        deg += 1.0
        self.dinv = 1.0 / np.sqrt(deg)
        offs = N + size * np.arange(m)
        coo = base_adj.tocoo()
        r = np.concatenate([coo.row, anchors, offs, np.arange(n)])
        c = np.concatenate([coo.col, offs, anchors, np.arange(n)])
        v = np.ones(len(r))
        const = sp.csr_matrix((v * self.dinv[r] * self.dinv[c], (r, c)), shape=(n, n))
        const.sort_indices()
        self.const = const
        a, b = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        self.rows = (offs[:, None] + a.ravel()[None, :]).ravel()
        self.cols = (offs[:, None] + b.ravel()[None, :]).ravel()
        self.norm = (self.dinv[self.rows] * self.dinv[self.cols])[:, None]

    def values(self, adj):
        return ad.mul(ad.reshape(adj, (self.m * self.size * self.size, 1)), self.norm)

    def apply(self, h, values):
        return ad.add(
            ad.sparse_dense_matmul(self.const, h),
            ad.sparse_values_matmul(self.rows, self.cols, values, (self.n, self.n), h),
        )


def trigger_loss(W, gen: TriggerGenerator, g, V_U, y_t: int, *, k: int = 2, params=None, relaxed: bool = False,
                 operator: AugmentedOperator | None = None):
    """Mean cross-entropy towards ``y_t`` of an SGC surrogate on ``V_U`` with triggers attached.

    ``W`` is treated as a constant.  ``operator`` pins the normalization (by
    default it is rebuilt from the current forward adjacency).  Returns
    ``(loss, generator_leaves)``.
    """
    V_U = np.asarray(V_U, dtype=np.int64)
    if V_U.size == 0:
        raise EmptyMask("update set is empty")
    W = np.asarray(ad._data(W))
    if params is None:
        tape = ad.Tape()
        params = [tape.variable(p) for p in gen.params]
    feats, adj, _ = gen.expressions(g, V_U, params, relaxed=relaxed)
    op = operator or AugmentedOperator(g.adjacency, V_U, adj.data, gen.trigger_size)
    vals = op.values(adj)
    XW = np.asarray(g.features_csr @ W) if hasattr(g, "features_csr") else np.asarray(g.features) @ W
    h = ad.concat_rows([XW, ad.matmul(feats, W)])
    for _ in range(k):
        h = op.apply(h, vals)
    logits = ad.take_rows(h, V_U)
    loss = ad.cross_entropy_mean(logits, np.full(len(V_U), y_t))
    return loss, params


def build_poisoned_graph(g, selection, gen: TriggerGenerator, y_t: int):
    """Attach a fresh trigger to every poisoned node and relabel anchors and trigger nodes to ``y_t``."""
    nodes = np.asarray(selection.nodes if hasattr(selection, "nodes") else selection, dtype=np.int64)
    if len(nodes) == 0:
        return attach_triggers(g, [], [])
    trigs = gen.triggers(g, nodes)
    n_new = len(nodes) * gen.trigger_size
    labels = np.concatenate([np.asarray(g.labels).copy(), np.full(n_new, y_t, dtype=np.int64)])
    labels[nodes] = y_t
    train_mask = np.concatenate([np.asarray(g.train), g.num_nodes + np.arange(n_new)])
    return attach_triggers(g, nodes, trigs, labels=labels, train=train_mask)


# --- orchestration ----------------------------------------------------------


def run_bgc(g, config: CondensationConfig, budget: AttackBudget, *, callback=None, selection=None):
    """Joint optimization of the synthetic graph and the trigger generator.

    Returns ``(S, generator, trace)``; ``S.selection`` keeps the poisoned nodes.
    """
    cfg = config
    budget.validate(g)
    seed = cfg.seed
    S = init_synthetic(g, cfg.ratio, seed, ratio_base=cfg.ratio_base, method=cfg.method,
                       threshold=cfg.threshold, structure_hidden=cfg.structure_hidden)
    gen = TriggerGenerator(g.num_features, budget.trigger_size, budget.generator, budget.generator_hidden,
                           seed=[seed, 2], lr=budget.lr_generator, full_connectivity=budget.full_connectivity,
                           weight_decay=budget.generator_weight_decay,
                           feature_range=feature_range(g) if budget.bound_features else None,
                           feature_mass=_trigger_mass(g, budget))
    if selection is None:
        selection = select_poison_nodes(g, budget, seed=seed)
    V_P = selection.nodes
    y_t = budget.target_class
    update_size = len(V_P) if budget.update_size is None else budget.update_size
    if budget.directed:
        pool = np.flatnonzero(np.asarray(g.labels) == budget.source_class)
    else:
        pool = None
    opt = _SyntheticOptimizer(S, cfg)
    trace = S.trace = []
    S.selection = selection
    clean_Z = None
    for epoch in range(cfg.epochs):
        W = train_surrogate(S, cfg, [seed, 1, epoch])
        lg = None
        if update_size > 0 and len(V_P) > 0:
            V_U = sample_update_set(g, update_size, [seed, 3, epoch], pool)
            for _ in range(cfg.M):
                loss_g, leaves = trigger_loss(W, gen, g, V_U, y_t, k=cfg.k)
                ad.backward(loss_g)
                gen.step([leaf.grad for leaf in leaves])
                lg = loss_g.item()
        if len(V_P):
            G_P = build_poisoned_graph(g, selection, gen, y_t)
            Z = source_features(G_P, cfg.method, cfg.k)
        else:
            G_P = g
            if clean_Z is None:
                clean_Z = source_features(g, cfg.method, cfg.k)
            Z = clean_Z
        labels = np.asarray(G_P.labels)
        masks = class_masks(labels, G_P.train, g.num_classes)
        lm = opt.step(Z, labels, masks, W)
        trace.append({"epoch": epoch, "matching_loss": lm, "trigger_loss": lg})
        if callback is not None:
            callback(epoch, S, gen)
    return S, gen, trace
