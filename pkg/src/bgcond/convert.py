"""Build graph bundles from the two common public citation-graph layouts.

* LINQS raw files: ``<name>.content`` (id, binary words, class) and
  ``<name>.cites`` (cited, citing).  No canonical split ships with them, so a
  seeded Planetoid-sized split is drawn: 20 train nodes per class, 500 val,
  1000 test.
* Planetoid pickles (``ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index}``),
  which carry the public split.
"""
from __future__ import annotations

import gzip
import pickle
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import BundleIncomplete
from .graph import NodeGraph, _symmetric_binary, save_graph_bundle


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt")
    return open(path)


def _find(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / (name + ".gz")):
        if cand.is_file():
            return cand
    raise BundleIncomplete(f"{directory}: missing {name}")


def planetoid_sized_split(labels, num_classes, seed=0, per_class=20, n_val=500, n_test=1000):
    rng = np.random.default_rng(seed)
    train = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        train.append(rng.choice(idx, size=min(per_class, len(idx)), replace=False))
    train = np.sort(np.concatenate(train))
    rest = rng.permutation(np.setdiff1d(np.arange(len(labels)), train))
    return train, np.sort(rest[:n_val]), np.sort(rest[n_val : n_val + n_test])


def from_linqs(directory, name: str = "cora", seed: int = 0) -> NodeGraph:
    directory = Path(directory)
    ids, feats, classes = [], [], []
    with _open_text(_find(directory, f"{name}.content")) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            feats.append(np.array(parts[1:-1], dtype=np.float64))
            classes.append(parts[-1])
    class_names = sorted(set(classes))
    labels = np.array([class_names.index(c) for c in classes], dtype=np.int64)
    index = {pid: i for i, pid in enumerate(ids)}
    rows, cols = [], []
    with _open_text(_find(directory, f"{name}.cites")) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) != 2 or parts[0] not in index or parts[1] not in index:
                continue
            rows.append(index[parts[0]])
            cols.append(index[parts[1]])
    n = len(ids)
    train, val, test = planetoid_sized_split(labels, len(class_names), seed=seed)
    return NodeGraph(
        adjacency=_symmetric_binary(rows, cols, n),
        features=np.vstack(feats),
        labels=labels,
        num_classes=len(class_names),
        train=train,
        val=val,
        test=test,
        name=name,
    )


def from_planetoid(directory, name: str) -> NodeGraph:
    directory = Path(directory)
    objs = {}
    for key in ("x", "tx", "allx", "y", "ty", "ally", "graph"):
        with open(_find(directory, f"ind.{name}.{key}"), "rb") as fh:
            objs[key] = pickle.load(fh, encoding="latin1")
    test_idx = np.loadtxt(_find(directory, f"ind.{name}.test.index"), dtype=np.int64)
    test_sorted = np.sort(test_idx)
    allx, tx = sp.csr_matrix(objs["allx"]), sp.csr_matrix(objs["tx"])
    ally, ty = np.asarray(objs["ally"]), np.asarray(objs["ty"])
    full_test = np.arange(test_sorted.min(), test_sorted.max() + 1)
    if len(full_test) != len(test_sorted):
        # citeseer has isolated test ids without features: pad with zero rows
        tx_ext = sp.lil_matrix((len(full_test), tx.shape[1]))
        tx_ext[test_sorted - test_sorted.min(), :] = tx
        ty_ext = np.zeros((len(full_test), ty.shape[1]))
        ty_ext[test_sorted - test_sorted.min(), :] = ty
        tx, ty = sp.csr_matrix(tx_ext), ty_ext
    features = sp.vstack([allx, tx]).tolil()
    features[test_idx, :] = features[test_sorted, :]
    onehot = np.vstack([ally, ty])
    onehot[test_idx, :] = onehot[test_sorted, :]
    labels = onehot.argmax(axis=1).astype(np.int64)
    n = features.shape[0]
    rows, cols = [], []
    for src, nbrs in objs["graph"].items():
        for dst in nbrs:
            if src < n and dst < n:
                rows.append(src)
                cols.append(dst)
    n_train = np.asarray(objs["y"]).shape[0]
    return NodeGraph(
        adjacency=_symmetric_binary(rows, cols, n),
        features=features.toarray(),
        labels=labels,
        num_classes=onehot.shape[1],
        train=np.arange(n_train),
        val=np.arange(n_train, n_train + 500),
        test=np.sort(test_idx),
        name=name,
    )


def row_normalize(g: NodeGraph) -> NodeGraph:
    """Scale every feature row to sum 1 (all-zero rows stay zero)."""
    X = np.asarray(g.features, dtype=np.float64)
    s = X.sum(axis=1, keepdims=True)
    return replace(g, features=X / np.where(s == 0, 1.0, s))


def packaged_raw_dir() -> Path:
    """Directory of the compressed LINQS Cora files shipped in the repository."""
    return Path(__file__).resolve().parents[2] / "data" / "raw"


def main(argv=None):
    import argparse

    p = argparse.ArgumentParser(prog="bgcond-convert", description=__doc__.splitlines()[0])
    p.add_argument("layout", choices=["linqs", "planetoid"])
    p.add_argument("source", help="directory holding the raw files")
    p.add_argument("out", help="bundle directory to write")
    p.add_argument("--name", default="cora")
    p.add_argument("--seed", type=int, default=0, help="split seed (linqs only)")
    p.add_argument("--row-normalize", action="store_true", help="scale feature rows to sum 1")
    args = p.parse_args(argv)
    try:
        g = from_linqs(args.source, args.name, args.seed) if args.layout == "linqs" else from_planetoid(args.source, args.name)
    except BundleIncomplete as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.row_normalize:
        g = row_normalize(g)
    save_graph_bundle(g, args.out)
    print(f"{g.name}: N={g.num_nodes} E={g.num_edges} d={g.num_features} C={g.num_classes} "
          f"train={len(g.train)} val={len(g.val)} test={len(g.test)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
