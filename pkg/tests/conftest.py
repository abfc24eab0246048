import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bgcond.convert import from_linqs, packaged_raw_dir
from bgcond.graph import generate_sbm_graph, make_graph, save_graph_bundle

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Entry-wise central differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def toy_graph():
    # 6 nodes, two triangles joined by one edge, two classes
    edges = [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (3, 5)]
    rng = np.random.default_rng(0)
    X = rng.normal(size=(6, 4))
    return make_graph(6, edges, X, [0, 0, 0, 1, 1, 1], train=[0, 1, 3, 4], val=[2], test=[5], name="toy")


@pytest.fixture(scope="session")
def sbm_small():
    return generate_sbm_graph(120, 3, 12, 0.1, 0.01, 0)


@pytest.fixture(scope="session")
def cora_graph():
    return from_linqs(packaged_raw_dir(), "cora", seed=0)


@pytest.fixture(scope="session")
def cora_bundle(tmp_path_factory, cora_graph) -> Path:
    path = tmp_path_factory.mktemp("bundles") / "cora"
    save_graph_bundle(cora_graph, path)
    return path
