import warnings

import numpy as np
import pytest

from unlearnprobe.gnn import GNNClassifier
from unlearnprobe.graph import Graph, split, synth_graph


@pytest.fixture(scope="session")
def synth():
    """The desk-scale benchmark graph: 200 nodes, 4 classes, 32 features."""
    return split(synth_graph(200, 4, 32, 0.05, 0.005, seed=0), 25, 10, seed=0)


@pytest.fixture(scope="session")
def small():
    """A 40-node graph small enough for brute-force oracles."""
    return split(synth_graph(40, 2, 6, 0.2, 0.02, seed=3), 8, 2, seed=3)


@pytest.fixture(scope="session")
def gcn(synth):
    return GNNClassifier("GCN", seed=0).fit(synth)


@pytest.fixture(scope="session")
def small_models(small):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return {b: GNNClassifier(b, hidden=16, epochs=60, seed=1).fit(small) for b in ("GCN", "SGC", "SAGE")}


def star_graph(leaves=4, D=3):
    """Hub 0 joined to ``leaves`` leaves, every node in the training set."""
    n = leaves + 1
    rng = np.random.default_rng(0)
    edges = np.array([(0, j) for j in range(1, n)])
    y = np.arange(n) % 2
    mask = np.ones(n, dtype=bool)
    return Graph(rng.standard_normal((n, D)), y, edges, 2, mask, np.zeros(n, bool), np.zeros(n, bool))
