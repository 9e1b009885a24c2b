"""Two-layer GCN / SGC / mean-aggregator SAGE node classifiers on the autodiff engine."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph
from .optim import AdamW
from .validation import check_choice, check_features, check_positive

BACKBONES = ("GCN", "SGC", "SAGE")
DEGREE_FLOOR = 1e-8
DENSE_LIMIT = 64


class TrainingDivergedError(FloatingPointError):
    pass


# -- propagation -----------------------------------------------------------------
def gcn_norm(adj: sp.spmatrix) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 for a constant 0/1 adjacency."""
    n = adj.shape[0]
    a = sp.csr_matrix(adj, dtype=np.float64) + sp.identity(n, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    dinv = sp.diags(1.0 / np.sqrt(d))
    return (dinv @ a @ dinv).tocsr()


def mean_norm(adj: sp.spmatrix) -> sp.csr_matrix:
    """Row-mean over neighbours; rows of isolated nodes stay zero."""
    a = sp.csr_matrix(adj, dtype=np.float64)
    d = np.asarray(a.sum(axis=1)).ravel()
    inv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    return (sp.diags(inv) @ a).tocsr()


class Propagator:
    """Normalised neighbourhood operator for one graph.

    Built either from a constant sparse adjacency or from a dense relaxed
    adjacency tensor (entries in [0, 1]) that may require grad.
    """

    def __init__(self, adj, backbone: str):
        self.backbone = check_choice(backbone, "backbone", BACKBONES)
        self.flagged = False
        if isinstance(adj, Tensor):
            self.dense = True
            self.op = self._dense_operator(adj)
        else:
            self.dense = False
            op = mean_norm(adj) if backbone == "SAGE" else gcn_norm(adj)
            # small graphs are cheaper as dense products than as sparse ones
            self.op = op.toarray() if op.shape[0] <= DENSE_LIMIT else op

    def _dense_operator(self, a: Tensor) -> Tensor:
        n = a.shape[0]
        rows = np.maximum(a.data.sum(axis=1), 0.0)
        if self.backbone == "SAGE":
            if np.any(rows < DEGREE_FLOOR):
                self.flagged = True
            deg = ad.add(ad.tsum(a, axis=1, keepdims=True), _floor_shift(rows))
            return ad.div(a, deg)
        at = ad.add(a, Tensor(np.eye(n), _check=False))
        dinv = ad.power(ad.tsum(at, axis=1, keepdims=True), -0.5)
        return ad.mul(ad.mul(dinv, at), ad.transpose(dinv))

    def __call__(self, h: Tensor) -> Tensor:
        return ad.matmul(self.op, h) if self.dense else ad.spmm(self.op, h)

    @property
    def n(self) -> int:
        return self.op.shape[0]


def _floor_shift(rows: np.ndarray) -> Tensor:
    # lifts zero row sums to the floor without touching the others
    shift = np.where(rows < DEGREE_FLOOR, DEGREE_FLOOR - rows, 0.0)
    return Tensor(shift.reshape(-1, 1), _check=False)


# -- parameters ---------------------------------------------------------------------
def param_layout(backbone: str, n_features: int, hidden: int, n_classes: int) -> list:
    if backbone == "GCN":
        return [("W1", (n_features, hidden)), ("b1", (hidden,)), ("W2", (hidden, n_classes))]
    if backbone == "SGC":
        return [("W", (n_features, n_classes))]
    if backbone == "SAGE":
        return [("W1_self", (n_features, hidden)), ("W1_nbr", (n_features, hidden)), ("b1", (hidden,)),
                ("W2_self", (hidden, n_classes)), ("W2_nbr", (hidden, n_classes))]
    raise ValueError(f"unknown backbone {backbone!r}")


@dataclass
class ModelState:
    """Trained parameters plus the architecture needed to rebuild the forward pass."""

    backbone: str
    n_features: int
    hidden: int
    n_classes: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def layout(self) -> list:
        return param_layout(self.backbone, self.n_features, self.hidden, self.n_classes)

    def arrays(self) -> list:
        return [self.params[name] for name, _ in self.layout]

    def tensors(self, requires_grad: bool = False) -> list:
        return [Tensor(a, requires_grad=requires_grad) for a in self.arrays()]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_flat(self, flat) -> "ModelState":
        """Copy of this state with parameters taken from a flat vector in layout order."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params(),):
            raise ValueError(f"expected {self.n_params()} values, got shape {flat.shape}")
        params, i = {}, 0
        for name, shape in self.layout:
            k = math.prod(shape)
            params[name] = flat[i:i + k].reshape(shape).copy()
            i += k
        return ModelState(self.backbone, self.n_features, self.hidden, self.n_classes, params, self.seed)

    def n_params(self) -> int:
        return sum(math.prod(s) for _, s in self.layout)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone, "n_features": self.n_features, "hidden": self.hidden,
            "n_classes": self.n_classes, "seed": self.seed,
            "params": {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelState":
        params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        state = cls(d["backbone"], d["n_features"], d["hidden"], d["n_classes"], params, d.get("seed", 0))
        for name, shape in state.layout:
            if params[name].shape != tuple(shape):
                raise ValueError(f"checkpoint parameter {name} has shape {params[name].shape}, expected {shape}")
        return state

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_params(backbone: str, n_features: int, hidden: int, n_classes: int, seed: int) -> dict:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_layout(backbone, n_features, hidden, n_classes):
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class GradientVector:
    """Flattened parameter gradient in a model's canonical layout."""

    layout: tuple
    flat: np.ndarray

    def __post_init__(self):
        self.layout = tuple((name, tuple(shape)) for name, shape in self.layout)
        self.flat = np.asarray(self.flat, dtype=np.float64).reshape(-1)
        if self.flat.size != sum(math.prod(s) for _, s in self.layout):
            raise ValueError("flat length does not match the layout")

    def __len__(self) -> int:
        return self.flat.size

    def segments(self) -> dict:
        out, lo = {}, 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out[name] = self.flat[lo:lo + size].reshape(shape)
            lo += size
        return out

    def _check(self, other: "GradientVector") -> None:
        if self.layout != other.layout:
            raise ValueError("gradient layouts differ")

    def __sub__(self, other: "GradientVector") -> "GradientVector":
        self._check(other)
        return GradientVector(self.layout, self.flat - other.flat)

    def __add__(self, other: "GradientVector") -> "GradientVector":
        self._check(other)
        return GradientVector(self.layout, self.flat + other.flat)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))

    def replace(self, flat) -> "GradientVector":
        return GradientVector(self.layout, flat)


# -- forward ---------------------------------------------------------------------------
def forward(backbone: str, params: list, X: Tensor, prop: Propagator):
    """Return ``(logits, hidden_embeddings)``; ``params`` follow :func:`param_layout` order."""
    if backbone == "GCN":
        W1, b1, W2 = params
        # propagate on the narrower side of the first product
        xw = ad.matmul(prop(X), W1) if X.shape[1] <= W1.shape[1] else prop(ad.matmul(X, W1))
        h = ad.relu(ad.add(xw, b1))
        return prop(ad.matmul(h, W2)), h
    if backbone == "SGC":
        (W,) = params
        h = prop(prop(X))
        return ad.matmul(h, W), h
    if backbone == "SAGE":
        W1s, W1n, b1, W2s, W2n = params
        h = ad.relu(ad.add(ad.add(ad.matmul(X, W1s), ad.matmul(prop(X), W1n)), b1))
        return ad.add(ad.matmul(h, W2s), ad.matmul(prop(h), W2n)), h
    raise ValueError(f"unknown backbone {backbone!r}")


def cross_entropy(logits: Tensor, y, rows=None) -> Tensor:
    """Mean cross-entropy over ``rows`` (all rows when None)."""
    if rows is not None:
        logits = ad.take_rows(logits, rows)
        y = np.asarray(y)[rows]
    y = np.asarray(y)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    picked = ad.tsum(ad.mul(ad.log_softmax(logits), Tensor(onehot, _check=False)))
    return ad.mul(picked, -1.0 / len(y))


def graph_propagator(g: Graph, backbone: str) -> Propagator:
    return Propagator(g.adjacency(), backbone)


def _rows(mask) -> np.ndarray:
    mask = np.asarray(mask)
    return np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)


def state_forward(state: ModelState, X, adj, params=None):
    """Forward pass of ``state`` on features ``X`` and an adjacency (sparse or relaxed tensor)."""
    X = X if isinstance(X, Tensor) else Tensor(check_features(X, state.n_features))
    prop = adj if isinstance(adj, Propagator) else Propagator(adj, state.backbone)
    return forward(state.backbone, params if params is not None else state.tensors(), X, prop)


def posteriors(state: ModelState, X, adj) -> np.ndarray:
    with ad.no_grad():
        logits, _ = state_forward(state, X, adj)
        return ad.row_softmax(logits).data


def embeddings(state: ModelState, X, adj) -> np.ndarray:
    with ad.no_grad():
        return state_forward(state, X, adj)[1].data


def loss_gradient(state: ModelState, g: Graph, mask) -> GradientVector:
    """Gradient of the mean cross-entropy over ``mask`` (no weight-decay term)."""
    rows = _rows(mask)
    if rows.size == 0:
        raise ValueError("loss_gradient needs a non-empty mask")
    params = state.tensors(requires_grad=True)
    logits, _ = state_forward(state, g.X, graph_propagator(g, state.backbone), params)
    loss = cross_entropy(logits, g.y, rows)
    grads = ad.grad(loss, params)
    return GradientVector(state.layout, np.concatenate([t.data.reshape(-1) for t in grads]))


def train_state(g: Graph, backbone: str, hidden: int, lr: float, weight_decay: float, epochs: int,
                seed: int, mask=None) -> ModelState:
    rows = _rows(g.train_mask if mask is None else mask)
    if rows.size == 0:
        raise ValueError("training mask is empty")
    hid = hidden if backbone != "SGC" else 0
    state = ModelState(backbone, g.n_features, hid, g.n_classes,
                       init_params(backbone, g.n_features, hid, g.n_classes, seed), seed)
    arrays = state.arrays()
    opt = AdamW(arrays, lr=lr, weight_decay=weight_decay)
    X = Tensor(g.X)
    prop = graph_propagator(g, backbone)
    for epoch in range(epochs):
        params = [Tensor(a, requires_grad=True, _check=False) for a in arrays]
        logits, _ = forward(backbone, params, X, prop)
        loss = cross_entropy(logits, g.y, rows)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"training loss became non-finite at epoch {epoch}")
        grads = ad.grad(loss, params)
        opt.step([t.data for t in grads])
        if not all(np.isfinite(a).all() for a in arrays):
            raise TrainingDivergedError(f"parameters became non-finite at epoch {epoch}")
    return state


class GNNClassifier(ClassifierMixin, BaseEstimator):
    """Full-batch node classifier trained with AdamW on cross-entropy.

    Parameters
    ----------
    backbone : {"GCN", "SGC", "SAGE"}
    hidden : int
        Width of the hidden layer (ignored by SGC).
    lr, weight_decay : float
        AdamW settings; weight decay is decoupled.
    epochs : int
    seed : int
        Controls parameter initialisation; training itself is deterministic.
    """

    def __init__(self, backbone="GCN", hidden=256, lr=0.005, weight_decay=5e-4, epochs=200, seed=0):
        self.backbone = backbone
        self.hidden = hidden
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.seed = seed

    def fit(self, g: Graph, mask=None):
        check_choice(self.backbone, "backbone", BACKBONES)
        check_positive(self.lr, "lr")
        check_positive(self.epochs, "epochs", integer=True)
        check_positive(self.hidden, "hidden", integer=True)
        check_positive(self.weight_decay, "weight_decay", strict=False)
        if mask is None and g.train_mask is None:
            raise ValueError("graph has no training mask; call split() first")
        self.state_ = train_state(g, self.backbone, self.hidden, self.lr, self.weight_decay,
                                  self.epochs, self.seed, mask)
        self.classes_ = np.arange(g.n_classes)
        return self

    @classmethod
    def from_state(cls, state: ModelState) -> "GNNClassifier":
        est = cls(backbone=state.backbone, hidden=max(state.hidden, 1), seed=state.seed)
        est.state_ = state
        est.classes_ = np.arange(state.n_classes)
        return est

    def predict_proba(self, g: Graph) -> np.ndarray:
        check_is_fitted(self, "state_")
        return posteriors(self.state_, g.X, g.adjacency())

    def predict(self, g: Graph) -> np.ndarray:
        return self.predict_proba(g).argmax(axis=1)

    def score(self, g: Graph, mask=None) -> float:
        rows = _rows(g.test_mask if mask is None else mask)
        return float(np.mean(self.predict(g)[rows] == g.y[rows]))

    def transform(self, g: Graph) -> np.ndarray:
        """Last hidden-layer embeddings."""
        check_is_fitted(self, "state_")
        return embeddings(self.state_, g.X, g.adjacency())

    def loss_gradient(self, g: Graph, mask=None) -> GradientVector:
        check_is_fitted(self, "state_")
        return loss_gradient(self.state_, g, g.train_mask if mask is None else mask)
