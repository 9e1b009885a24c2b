"""Exact unlearning by retraining, and the gradient difference it leaks."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .gnn import GNNClassifier, GradientVector, ModelState, loss_gradient
from .graph import DeletionRequest, Graph, RecoveryTarget, canonical_edges, recovery_target
from .validation import check_choice, check_request


class EmptiedClassWarning(UserWarning):
    """A deletion removed every training node of some class."""


@dataclass(frozen=True)
class UnlearnCounts:
    """What the attacker is told about a deletion: sizes and labels, never identities."""

    n_deleted: int
    n_nodes: int
    n_edges: int
    labels: tuple

    def to_dict(self) -> dict:
        return {"n_deleted": self.n_deleted, "n_nodes": self.n_nodes, "n_edges": self.n_edges,
                "labels": list(self.labels)}

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnCounts":
        return cls(int(d["n_deleted"]), int(d["n_nodes"]), int(d["n_edges"]), tuple(int(v) for v in d["labels"]))

    @classmethod
    def from_target(cls, target: RecoveryTarget) -> "UnlearnCounts":
        return cls(target.n_deleted, target.n_nodes, target.n_edges, tuple(int(v) for v in target.rec_y))


@dataclass
class UnlearnResult:
    request: DeletionRequest
    remaining: Graph
    original: ModelState
    unlearned: ModelState
    grad_original: GradientVector
    grad_unlearned: GradientVector
    counts: UnlearnCounts
    target: RecoveryTarget

    @property
    def grad_diff(self) -> GradientVector:
        return self.grad_original - self.grad_unlearned

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.original.save(d / "original.json")
        self.unlearned.save(d / "unlearned.json")
        np.save(d / "grad_diff.npy", self.grad_diff.flat)
        np.save(d / "grad_original.npy", self.grad_original.flat)
        np.save(d / "grad_unlearned.npy", self.grad_unlearned.flat)
        meta = {"counts": self.counts.to_dict(), "deleted_nodes": list(self.request.deleted_nodes),
                "policy": self.request.policy, "rec_nodes": self.target.rec_nodes.tolist()}
        (d / "counts.json").write_text(json.dumps(meta, indent=2))


def remove_nodes(g: Graph, req: DeletionRequest) -> Graph:
    """Drop the requested nodes and every incident edge, re-indexing the rest.

    The result may contain isolated nodes; ``node_ids`` keeps the old ids.
    """
    check_request(g, req)
    deleted = np.asarray(req.deleted_nodes)
    keep = np.setdiff1d(np.arange(g.n), deleted)
    new_id = np.full(g.n, -1, dtype=np.int64)
    new_id[keep] = np.arange(len(keep))
    e = g.edges
    sel = ~(np.isin(e[:, 0], deleted) | np.isin(e[:, 1], deleted))
    edges = canonical_edges(new_id[e[sel]]) if sel.any() else np.zeros((0, 2), dtype=np.int64)
    masks = [None if m is None else m[keep] for m in (g.train_mask, g.val_mask, g.test_mask)]
    out = Graph(X=g.X[keep], y=g.y[keep], edges=edges, n_classes=g.n_classes,
                train_mask=masks[0], val_mask=masks[1], test_mask=masks[2], node_ids=g.node_ids[keep])
    if masks[0] is not None:
        before = set(np.unique(g.y[g.train_mask]).tolist())
        after = set(np.unique(out.y[out.train_mask]).tolist())
        if before - after:
            warnings.warn(f"deletion empties training class(es) {sorted(before - after)}", EmptiedClassWarning,
                          stacklevel=2)
    return out


class RetrainUnlearner(BaseEstimator):
    """Unlearn by retraining from the original seed on ``G \\ ΔG``.

    ``grad_eval="own"`` evaluates each model's gradient on its own training
    graph; ``"remaining"`` evaluates both on the remaining graph.
    ``induced_target`` switches the recovery target to the induced subgraph
    on the recovery nodes.
    """

    def __init__(self, backbone="GCN", hidden=256, lr=0.005, weight_decay=5e-4, epochs=200, seed=0,
                 grad_eval="own", induced_target=False):
        self.backbone = backbone
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed
        self.grad_eval = grad_eval
        self.induced_target = induced_target

    def _classifier(self) -> GNNClassifier:
        return GNNClassifier(self.backbone, self.hidden, self.lr, self.weight_decay, self.epochs, self.seed)

    def fit(self, g: Graph, request: DeletionRequest, original: ModelState | None = None):
        check_choice(self.grad_eval, "grad_eval", ("own", "remaining"))
        check_request(g, request)
        if original is None:
            original = self._classifier().fit(g).state_
        remaining = remove_nodes(g, request)
        unlearned = self._classifier().fit(remaining).state_
        if self.grad_eval == "own":
            g_ori = loss_gradient(original, g, g.train_mask)
        else:
            g_ori = loss_gradient(original, remaining, remaining.train_mask)
        g_un = loss_gradient(unlearned, remaining, remaining.train_mask)
        target = recovery_target(g, request, induced=self.induced_target)
        self.result_ = UnlearnResult(request, remaining, original, unlearned, g_ori, g_un,
                                     UnlearnCounts.from_target(target), target)
        return self


def retrain_unlearn(g: Graph, request: DeletionRequest, original: ModelState | None = None, **params) -> UnlearnResult:
    return RetrainUnlearner(**params).fit(g, request, original).result_
