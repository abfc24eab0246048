"""scikit-learn style wrappers over the functional API.

The "X" passed to ``fit``/``predict`` is a graph object (``NodeGraph``,
``SyntheticGraph`` or an ``AugmentedGraph``); labels and masks live on it.
"""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backdoor import AttackBudget, run_bgc
from .condense import CondensationConfig, condense_clean
from .errors import InvalidParams
from .evaluation import TrainedModel, compute_asr, triggered_graph
from .models import ModelSpec, evaluate_accuracy, train


def _check_graph(g):
    for attr in ("adjacency", "features", "labels", "num_classes", "train"):
        if not hasattr(g, attr):
            raise InvalidParams(f"expected a graph object, got {type(g).__name__} without .{attr}")
    return g


class GNNClassifier(ClassifierMixin, BaseEstimator):
    """Node classifier; ``fit`` trains on ``mask`` (default: the graph's train split)."""

    def __init__(self, kind="GCN", layers=2, hidden=256, k=2, dropout=0.5, lr=0.01, epochs=200,
                 weight_decay=5e-4, seed=0):
        self.kind = kind
        self.layers = layers
        self.hidden = hidden
        self.k = k
        self.dropout = dropout
        self.lr = lr
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed

    def _spec(self):
        return ModelSpec(self.kind, layers=self.layers, hidden=self.hidden, k=self.k, dropout=self.dropout)

    def fit(self, graph, y=None, mask=None):
        g = _check_graph(graph)
        mask = g.train if mask is None else np.asarray(mask, dtype=np.int64)
        self.spec_ = self._spec()
        self.params_ = train(self.spec_, g, mask, lr=self.lr, epochs=self.epochs,
                             weight_decay=self.weight_decay, seed=self.seed, labels=y)
        self.classes_ = np.arange(g.num_classes)
        return self

    @property
    def model_(self) -> TrainedModel:
        check_is_fitted(self, "params_")
        return TrainedModel(self.spec_, self.params_)

    def decision_function(self, graph, nodes=None):
        logits = self.model_.logits(_check_graph(graph))
        return logits if nodes is None else logits[np.asarray(nodes, dtype=np.int64)]

    def predict_proba(self, graph, nodes=None):
        z = self.decision_function(graph, nodes)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, graph, nodes=None):
        return self.decision_function(graph, nodes).argmax(axis=1)

    def score(self, graph, y=None, mask=None):
        g = _check_graph(graph)
        mask = g.test if mask is None else mask
        return evaluate_accuracy(self.params_, self.spec_, g, mask)


def _config_params(cls):
    return [f.name for f in fields(cls)]


class GraphCondenser(TransformerMixin, BaseEstimator):
    """Clean gradient-matching condensation; ``transform`` returns the synthetic graph."""

    def __init__(self, method="GCond", ratio=0.026, epochs=1000, lr_features=0.01, lr_structure=0.001, T=10,
                 M=1, lr_surrogate=0.01, k=2, threshold=0.5, structure_hidden=128, ratio_base="nodes",
                 optimizer="adam", seed=0):
        self.method = method
        self.ratio = ratio
        self.epochs = epochs
        self.lr_features = lr_features
        self.lr_structure = lr_structure
        self.T = T
        self.M = M
        self.lr_surrogate = lr_surrogate
        self.k = k
        self.threshold = threshold
        self.structure_hidden = structure_hidden
        self.ratio_base = ratio_base
        self.optimizer = optimizer
        self.seed = seed

    def _config(self) -> CondensationConfig:
        return CondensationConfig(**{n: getattr(self, n) for n in _config_params(CondensationConfig)})

    def fit(self, graph, y=None):
        self.synthetic_ = condense_clean(_check_graph(graph), self._config())
        return self

    def transform(self, graph):
        check_is_fitted(self, "synthetic_")
        return self.synthetic_


class BackdoorCondenser(GraphCondenser):
    """Condensation with the trigger-generator backdoor injected."""

    def __init__(self, method="GCond", ratio=0.026, epochs=1000, lr_features=0.01, lr_structure=0.001, T=10,
                 M=1, lr_surrogate=0.01, k=2, threshold=0.5, structure_hidden=128, ratio_base="nodes",
                 optimizer="adam", seed=0, poison_ratio=0.1, poison_count=None, trigger_size=4,
                 degree_weight=1.0, clusters=1, target_class=0, update_size=None, directed=False,
                 source_class=None, selection="score", score_sign=1, full_connectivity=False, generator="GCN",
                 generator_hidden=128, lr_generator=0.01, generator_weight_decay=5e-4, bound_features=True,
                 feature_mass_scale=1.0, selector_hidden=128, selector_epochs=200):
        super().__init__(method, ratio, epochs, lr_features, lr_structure, T, M, lr_surrogate, k, threshold,
                         structure_hidden, ratio_base, optimizer, seed)
        self.poison_ratio = poison_ratio
        self.poison_count = poison_count
        self.trigger_size = trigger_size
        self.degree_weight = degree_weight
        self.clusters = clusters
        self.target_class = target_class
        self.update_size = update_size
        self.directed = directed
        self.source_class = source_class
        self.selection = selection
        self.score_sign = score_sign
        self.full_connectivity = full_connectivity
        self.generator = generator
        self.generator_hidden = generator_hidden
        self.lr_generator = lr_generator
        self.generator_weight_decay = generator_weight_decay
        self.bound_features = bound_features
        self.feature_mass_scale = feature_mass_scale
        self.selector_hidden = selector_hidden
        self.selector_epochs = selector_epochs

    def _budget(self) -> AttackBudget:
        return AttackBudget(**{n: getattr(self, n) for n in _config_params(AttackBudget)})

    def fit(self, graph, y=None):
        g = _check_graph(graph)
        self.synthetic_, self.generator_, self.trace_ = run_bgc(g, self._config(), self._budget())
        self.selection_ = self.synthetic_.selection
        return self

    def trigger(self, graph, nodes):
        """``graph`` with generated triggers attached to ``nodes``."""
        check_is_fitted(self, "generator_")
        return triggered_graph(self.generator_, graph, np.asarray(nodes, dtype=np.int64))

    def attack_success_rate(self, clf: GNNClassifier, graph, mask=None):
        g = _check_graph(graph)
        mask = g.test if mask is None else mask
        src = self.source_class if self.directed else None
        return compute_asr(clf.model_, self.generator_, g, mask, self.target_class, source_class=src)
