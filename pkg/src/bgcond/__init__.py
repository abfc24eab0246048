"""Gradient-matching graph condensation and a trigger-generator backdoor against it."""
from .backdoor import AttackBudget, TriggerGenerator, run_bgc, select_poison_nodes
from .condense import CondensationConfig, SyntheticGraph, condense_clean
from .estimators import BackdoorCondenser, GNNClassifier, GraphCondenser
from .graph import NodeGraph, generate_sbm_graph, load_graph_bundle, normalize_adjacency, save_graph_bundle
from .models import ModelSpec, evaluate_accuracy, train

__version__ = "0.1.0"

__all__ = [
    "AttackBudget",
    "BackdoorCondenser",
    "CondensationConfig",
    "GNNClassifier",
    "GraphCondenser",
    "ModelSpec",
    "NodeGraph",
    "SyntheticGraph",
    "TriggerGenerator",
    "condense_clean",
    "evaluate_accuracy",
    "generate_sbm_graph",
    "load_graph_bundle",
    "normalize_adjacency",
    "run_bgc",
    "save_graph_bundle",
    "select_poison_nodes",
    "train",
]
