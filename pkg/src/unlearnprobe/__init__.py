"""Reconstructing deleted graph regions from the gradients of unlearned GNNs."""

from .attack import AttackInputs, AttackResult, DummyGraph, RegionReconstructor, baseline_fewe, baseline_rand, run_attack
from .blackbox import BlackBoxReconstructor, ModelExtractor, PosteriorOracle, zo_gradient
from .defense import DefenseConfig, GradientDefense, laplace_gradient, prune_gradient
from .gnn import GNNClassifier, GradientVector, ModelState
from .graph import (DeletionRequest, Graph, RecoveryTarget, load_graph, save_graph, select_groups, select_targets,
                    split, synth_graph)
from .harness import ExperimentConfig, run_experiment
from .metrics import MetricReport, embedding_w2, evaluate, pmgk, posterior_w2, rnmse
from .unlearn import RetrainUnlearner, UnlearnCounts, UnlearnResult, remove_nodes, retrain_unlearn

__version__ = "0.1.0"

__all__ = [
    "AttackInputs", "AttackResult", "BlackBoxReconstructor", "DefenseConfig", "DeletionRequest", "DummyGraph",
    "ExperimentConfig", "GNNClassifier", "Graph", "GradientDefense", "GradientVector", "RegionReconstructor",
    "MetricReport", "ModelExtractor", "ModelState", "PosteriorOracle", "RecoveryTarget", "RetrainUnlearner",
    "UnlearnCounts", "UnlearnResult", "baseline_fewe", "baseline_rand", "embedding_w2", "evaluate",
    "laplace_gradient", "load_graph", "pmgk", "posterior_w2", "prune_gradient", "remove_nodes",
    "retrain_unlearn", "rnmse", "run_attack", "run_experiment", "save_graph", "select_groups", "select_targets",
    "split", "synth_graph",
    "zo_gradient",
]
