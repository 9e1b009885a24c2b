"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numbers

import numpy as np


class GraphValidationError(ValueError):
    pass


def check_positive(value, name: str, *, strict: bool = True, integer: bool = False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {value!r}")
    if (strict and value <= 0) or (not strict and value < 0):
        raise ValueError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value!r}")
    return value


def check_fraction(value, name: str, *, low_open=True, high_open=False):
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return float(value)


def check_choice(value, name: str, choices):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_features(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("feature matrix contains NaN or Inf")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_graph(g, *, allow_isolated: bool = False) -> None:
    """Verify the invariants of a :class:`~unlearnprobe.graph.Graph`."""
    n = g.n
    e = g.edges
    if e.size:
        if e.ndim != 2 or e.shape[1] != 2:
            raise GraphValidationError("edges must be an (m, 2) array")
        if e.min() < 0 or e.max() >= n:
            raise GraphValidationError("edge references a node outside [0, n)")
        if np.any(e[:, 0] == e[:, 1]):
            raise GraphValidationError("self-loop in edge set")
        if np.any(e[:, 0] > e[:, 1]):
            raise GraphValidationError("edges must be canonical (u < v)")
        if len(np.unique(e[:, 0] * n + e[:, 1])) != len(e):
            raise GraphValidationError("duplicate edge")
    if g.X.shape[0] != n or g.y.shape[0] != n:
        raise GraphValidationError("feature/label row count differs from node count")
    if not allow_isolated and n and np.any(g.degrees() == 0):
        raise GraphValidationError("graph has isolated nodes")
    masks = [m for m in (g.train_mask, g.val_mask, g.test_mask) if m is not None]
    for m in masks:
        if m.shape != (n,) or m.dtype != bool:
            raise GraphValidationError("masks must be boolean n-vectors")
    if len(masks) == 3 and np.any(masks[0].astype(int) + masks[1] + masks[2] > 1):
        raise GraphValidationError("train/val/test masks overlap")


def check_request(g, req) -> None:
    nodes = np.asarray(req.deleted_nodes)
    if nodes.size == 0:
        raise ValueError("deletion request is empty")
    if len(set(nodes.tolist())) != nodes.size:
        raise ValueError("deletion request repeats a node")
    if nodes.min() < 0 or nodes.max() >= g.n:
        raise ValueError("deletion request references an unknown node")
    if g.train_mask is None or not g.train_mask[nodes].all():
        raise ValueError("deleted nodes must be training nodes")
