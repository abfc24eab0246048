"""Attack and utility metrics, cross-architecture evaluation and the two defenses."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import EmptyMask, InvalidParams
from .graph import _normalize, attach_triggers, edge_list
from .models import ModelSpec, evaluate_accuracy, forward, operator_for, predict_logits, train, _features_for

CSV_HEADER = ("dataset", "method", "ratio", "seed", "cta", "asr", "c_cta", "c_asr", "defense", "d_cta", "d_asr", "wall_s")

# models trained on a condensed graph
DOWNSTREAM_TRAINING = {"epochs": 600, "lr": 0.01, "weight_decay": 5e-4}


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: object

    def logits(self, graph, adjacency=None) -> np.ndarray:
        return predict_logits(self.spec, self.params, graph, adjacency)

    def predict(self, graph, nodes=None, adjacency=None) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class
        pred = self.logits(graph, adjacency).argmax(axis=1)
        return pred if nodes is None else pred[np.asarray(nodes, dtype=np.int64)]


def fit_downstream(spec: ModelSpec, S, seed, **overrides) -> TrainedModel:
    kw = {**DOWNSTREAM_TRAINING, **overrides}
    return TrainedModel(spec, train(spec, S, S.train, seed=seed, **kw))


@dataclass
class MetricsRecord:
    dataset: str
    method: str
    ratio: float
    seed: int
    cta: float
    asr: float | None = None
    c_cta: float | None = None
    c_asr: float | None = None
    defense: str | None = None
    d_cta: float | None = None
    d_asr: float | None = None
    wall_s: float = 0.0
    arch: str = "GCN"
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("cta", "asr", "c_cta", "c_asr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise InvalidParams(f"{name}={v} outside [0, 1]")
        if self.defense is None and (self.d_cta is not None or self.d_asr is not None):
            raise InvalidParams("delta fields are only meaningful on defense rows")

    def row(self) -> list[str]:
        out = []
        for name in CSV_HEADER:
            v = getattr(self, name)
            if name == "method":
                v = f"{v}:{self.arch}"
            out.append("" if v is None else repr(float(v)) if isinstance(v, float) else str(v))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def write_csv(records, path, append: bool = False) -> Path:
    path = Path(path)
    fresh = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(records, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def render_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


# --- metrics ----------------------------------------------------------------


def compute_cta(model: TrainedModel, g, mask) -> float:
    return evaluate_accuracy(model.params, model.spec, g, mask)


def asr_nodes(g, mask, y_t: int, exclude_already_target: bool = True, source_class: int | None = None):
    nodes = np.asarray(mask, dtype=np.int64)
    labels = np.asarray(g.labels)
    if exclude_already_target:
        nodes = nodes[labels[nodes] != y_t]
    if source_class is not None:
        nodes = nodes[labels[nodes] == source_class]
    if len(nodes) == 0:
        raise EmptyMask("no test nodes left for the attack success rate")
    return nodes


def triggered_graph(gen, g, nodes):
    """``g`` with a freshly generated trigger on every node of ``nodes`` (all attached at once)."""
    return attach_triggers(g, nodes, gen.triggers(g, nodes))


def compute_asr(model: TrainedModel, gen, g, mask, y_t: int, exclude_already_target: bool = True,
                source_class: int | None = None, predictor=None) -> float:
    nodes = asr_nodes(g, mask, y_t, exclude_already_target, source_class)
    aug = triggered_graph(gen, g, nodes)
    pred = model.predict(aug, nodes) if predictor is None else predictor(aug, nodes)
    return float(np.mean(pred == y_t))


# --- defenses ---------------------------------------------------------------


def _cosine_rows(X, i, j):
    X = np.asarray(X, dtype=np.float64)
    a, b = X[i], X[j]
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    denom = na * nb
    dot = (a * b).sum(axis=1)
    return np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)


def _edge_set(graph) -> np.ndarray:
    dense = getattr(graph, "dense_adjacency", None)
    if callable(dense):
        A = dense()
        r, c = np.nonzero(np.triu(A, k=1))
        return np.stack([r, c], axis=1).astype(np.int64)
    return edge_list(graph.adjacency)


def pruned_edges(graph, fraction: float = 0.2) -> np.ndarray:
    """The ``⌊fraction·|E|⌋`` lowest-cosine edges as sorted ``(src, dst)`` pairs, src < dst."""
    if not 0.0 <= fraction < 1.0:
        raise InvalidParams("fraction must lie in [0, 1)")
    E = _edge_set(graph)
    n_remove = int(math.floor(fraction * len(E)))
    if n_remove == 0:
        return np.zeros((0, 2), dtype=np.int64)
    sim = _cosine_rows(graph.features, E[:, 0], E[:, 1])
    order = np.lexsort((E[:, 1], E[:, 0], sim))
    removed = E[order[:n_remove]]
    return removed[np.lexsort((removed[:, 1], removed[:, 0]))]


def prune_defense(graph, fraction: float = 0.2):
    """Copy of ``graph`` without its lowest-similarity ``⌊fraction·|E|⌋`` edges."""
    removed = pruned_edges(graph, fraction)
    dense = getattr(graph, "dense_adjacency", None)
    if callable(dense):
        A = dense().copy()
        A[removed[:, 0], removed[:, 1]] = 0.0
        A[removed[:, 1], removed[:, 0]] = 0.0
        return graph.with_adjacency(A)
    A = sp.lil_matrix(graph.adjacency)
    A[removed[:, 0], removed[:, 1]] = 0.0
    A[removed[:, 1], removed[:, 0]] = 0.0
    A = sp.csr_matrix(A)
    A.eliminate_zeros()
    A.sort_indices()
    return graph.with_adjacency(A)


def _n_propagations(spec: ModelSpec) -> int:
    if spec.kind == "MLP":
        return 0
    return spec.k if spec.kind == "SGC" else spec.layers


def _keep_operator(upper, keep, n):
    kept = sp.coo_matrix((upper.data[keep], (upper.row[keep], upper.col[keep])), shape=(n, n))
    A = sp.csr_matrix(kept + kept.T)
    A.sort_indices()
    return _normalize(A)


def randsmooth_predict(model: TrainedModel, g, nodes=None, d: int = 10, keep_prob: float = 0.8, seed=0,
                       samples=None) -> np.ndarray:
    """Majority vote over ``d`` forwards, each propagation step on its own edge subsample.

    ``samples`` optionally fixes the subsamples: a sequence of length ``d``
    whose items hold one boolean keep-mask per propagation step over the
    undirected edges (in :func:`edge_list` order).  Vote ties go to the lowest
    class.
    """
    if samples is None and d < 1:
        raise InvalidParams("need at least one subsample")
    if not 0.0 <= keep_prob <= 1.0:
        raise InvalidParams("keep_prob must lie in [0, 1]")
    adj = sp.csr_matrix(g.adjacency)
    n = adj.shape[0]
    upper = sp.triu(adj, k=1).tocoo()
    # edge_list order is row-major over the upper triangle, same as the sorted coo
    order = np.lexsort((upper.col, upper.row))
    upper = sp.coo_matrix((upper.data[order], (upper.row[order], upper.col[order])), shape=(n, n))
    L = _n_propagations(model.spec)
    X = _features_for(g)
    C = g.num_classes
    idx = np.arange(n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    votes = np.zeros((len(idx), C), dtype=np.int64)
    if samples is None:
        rng = np.random.default_rng(seed)
        full = keep_prob >= 1.0
        samples = []
        for _ in range(d):
            if full:
                samples.append([None] * L)
            else:
                samples.append([rng.random(upper.nnz) < keep_prob for _ in range(L)])
    full_op = None
    for masks in samples:
        ops = []
        for m in masks:
            if m is None or np.all(m):
                if full_op is None:
                    full_op = operator_for(g)
                ops.append(full_op)
            else:
                ops.append(_keep_operator(upper, np.asarray(m, dtype=bool), n))
        adjacency = ops if L else None
        logits = forward(model.spec, model.params, adjacency, X).data
        pred = logits[idx].argmax(axis=1)
        votes[np.arange(len(idx)), pred] += 1
    return votes.argmax(axis=1)


# --- experiment-level evaluation ----------------------------------------------


def cross_architecture_eval(S, gen, archs, g, seeds, *, clean_S=None, y_t: int = 0, dataset: str = "",
                            method: str = "", ratio: float = 0.0, exclude_already_target: bool = True,
                            source_class: int | None = None) -> list[MetricsRecord]:
    """Train every architecture on ``S`` (and on ``clean_S`` for the clean baselines) per seed."""
    for a in archs:
        if a.kind not in ("GCN", "SGC", "MLP"):
            raise InvalidParams(f"unsupported architecture {a.kind}")
    out = []
    for spec in archs:
        for seed in seeds:
            t0 = time.perf_counter()
            model = fit_downstream(spec, S, seed)
            cta = compute_cta(model, g, g.test)
            asr = compute_asr(model, gen, g, g.test, y_t, exclude_already_target, source_class)
            c_cta = c_asr = None
            if clean_S is not None:
                clean = fit_downstream(spec, clean_S, seed)
                c_cta = compute_cta(clean, g, g.test)
                c_asr = compute_asr(clean, gen, g, g.test, y_t, exclude_already_target, source_class)
            out.append(MetricsRecord(dataset, method, ratio, int(seed), cta, asr, c_cta, c_asr,
                                     wall_s=time.perf_counter() - t0, arch=spec.kind))
    return out


def defended_record(base: MetricsRecord, defense: str, cta: float, asr: float) -> MetricsRecord:
    """Defense row: deltas are defended minus undefended (negative means the defense lowered the metric)."""
    d_asr = None if base.asr is None else asr - base.asr
    return MetricsRecord(base.dataset, base.method, base.ratio, base.seed, cta, asr, base.c_cta, base.c_asr,
                         defense, cta - base.cta, d_asr, base.wall_s, base.arch, dict(base.context))


def defense_eval(S, gen, g, spec: ModelSpec, seed, base: MetricsRecord, defense: str, *, y_t: int = 0,
                 fraction: float = 0.2, d: int = 10, keep_prob: float = 0.8,
                 exclude_already_target: bool = True, source_class: int | None = None,
                 training: dict | None = None) -> MetricsRecord:
    """Apply ``prune`` (to the condensed graph) or ``randsmooth`` (at prediction time) and report deltas."""
    if defense == "prune":
        model = fit_downstream(spec, prune_defense(S, fraction), seed, **(training or {}))
        cta = compute_cta(model, g, g.test)
        asr = compute_asr(model, gen, g, g.test, y_t, exclude_already_target, source_class)
    elif defense == "randsmooth":
        model = fit_downstream(spec, S, seed, **(training or {}))
        test = np.asarray(g.test)
        pred = randsmooth_predict(model, g, test, d, keep_prob, seed=[int(seed), 13])
        cta = float(np.mean(pred == np.asarray(g.labels)[test]))
        asr = compute_asr(
            model, gen, g, g.test, y_t, exclude_already_target, source_class,
            predictor=lambda aug, nodes: randsmooth_predict(model, aug, nodes, d, keep_prob, seed=[int(seed), 14]),
        )
    else:
        raise InvalidParams(f"unknown defense {defense!r}")
    return defended_record(base, defense, cta, asr)


def summarize(records) -> dict:
    """Mean and population std of every metric, grouped by (dataset, method, ratio, arch, defense)."""
    groups: dict = {}
    for r in records:
        key = (r.dataset, r.method, r.ratio, r.arch, r.defense or "")
        groups.setdefault(key, []).append(r)
    out = []
    for key, rows in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        entry = {"dataset": key[0], "method": key[1], "ratio": key[2], "arch": key[3], "defense": key[4],
                 "n": len(rows), "seeds": [r.seed for r in rows]}
        for f in ("cta", "asr", "c_cta", "c_asr", "d_cta", "d_asr"):
            vals = [getattr(r, f) for r in rows if getattr(r, f) is not None]
            if vals:
                entry[f] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        out.append(entry)
    return {"groups": out}


def record_fields() -> list[str]:
    return [f.name for f in fields(MetricsRecord)]
