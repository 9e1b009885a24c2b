"""Query-only variant of the attack.

Both victims are reachable only through :class:`PosteriorOracle`. Each is
copied with a data-free extraction loop (generator versus copycat, the
generator's gradient estimated from victim queries), and the white-box
optimiser then runs on the copies with an extra semantic term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .attack import AttackInputs, RegionReconstructor
from .autodiff import Tensor
from .graph import edge_adjacency
from .gnn import GradientVector, ModelState, Propagator, cross_entropy, forward, init_params
from .optim import AdamW
from .unlearn import UnlearnCounts
from .validation import check_positive


class OracleError(RuntimeError):
    """A posterior query failed."""


class ExtractionError(RuntimeError):
    pass


def _check_relaxed(adj: np.ndarray) -> None:
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError("query adjacency must be square")
    if adj.min() < 0 or adj.max() > 1:
        raise ValueError("query adjacency entries must lie in [0, 1]")
    if not np.allclose(adj, adj.T) or np.any(np.diag(adj) != 0):
        raise ValueError("query adjacency must be symmetric with a zero diagonal")


class PosteriorOracle:
    """Answers ``(features, relaxed adjacency) -> row-stochastic posteriors`` for a hidden model.

    Nothing else about the model is exposed.
    """

    def __init__(self, model: ModelState):
        self.__model = model
        self.n_queries = 0
        self.n_features = model.n_features
        self.n_classes = model.n_classes

    def query(self, X, adj) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        adj = np.asarray(adj, dtype=np.float64)
        _check_relaxed(adj)
        if X.shape != (adj.shape[0], self.n_features):
            raise ValueError(f"query features must have shape ({adj.shape[0]}, {self.n_features})")
        self.n_queries += 1
        m = self.__model
        with ad.no_grad():
            logits, _ = forward(m.backbone, m.tensors(), Tensor(X, _check=False),
                                Propagator(Tensor(adj, _check=False), m.backbone))
            return ad.row_softmax(logits).data


def _ask(oracle, X, adj, retries: int) -> np.ndarray:
    for attempt in range(retries + 1):
        try:
            P = oracle.query(X, adj)
        except OracleError:
            if attempt == retries:
                raise ExtractionError(f"oracle failed {retries + 1} times in a row") from None
            continue
        return np.asarray(P, dtype=np.float64)
    raise AssertionError("unreachable")


# -- zeroth-order estimation -------------------------------------------------------
def zo_gradient(loss_fn, x, m: int = 64, eps: float = 1e-4, seed: int = 0) -> np.ndarray:
    """Random-direction finite-difference gradient estimate.

    Directions are Gaussian draws normalised to the unit sphere, so the
    ``dim / eps`` scaling makes the estimate unbiased for linear losses.
    """
    check_positive(m, "m", integer=True)
    check_positive(eps, "eps")
    x = np.asarray(x, dtype=np.float64)
    dim = x.size
    rng = np.random.default_rng(seed)
    base = loss_fn(x)
    est = np.zeros_like(x)
    for _ in range(m):
        u = rng.standard_normal(x.shape)
        u /= np.linalg.norm(u)
        est += (loss_fn(x + eps * u) - base) * (dim / eps) * u
    return est / m


def disagreement(P_victim, P_copy) -> float:
    """Mean over rows of the L1 distance between two posterior matrices."""
    return float(np.mean(np.abs(np.asarray(P_victim) - np.asarray(P_copy)).sum(axis=1)))


# -- generator ------------------------------------------------------------------------
@dataclass
class GeneratorState:
    """Three-layer MLP from a latent vector to node features and a relaxed adjacency."""

    params: list
    n_nodes: int
    n_features: int
    latent: int

    @classmethod
    def init(cls, n_nodes: int, n_features: int, latent: int = 64, hidden=(128, 256), edge_density: float = 0.02,
             seed: int = 0):
        """He-scaled hidden layers and a unit-variance output layer, so emitted features
        start near unit scale. The adjacency logits are offset to ``edge_density``: a
        dense half-weighted start would make every propagated row identical."""
        if not 0.0 < edge_density < 1.0:
            raise ValueError(f"edge_density must lie in (0, 1), got {edge_density}")
        rng = np.random.default_rng(seed)
        n_pairs = n_nodes * (n_nodes - 1) // 2
        sizes = [latent, hidden[0], hidden[1], n_nodes * n_features + n_pairs]
        params = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = 1.0 if i == len(sizes) - 2 else 2.0
            params += [rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in), np.zeros(fan_out)]
        params[-1][n_nodes * n_features:] = np.log(edge_density / (1.0 - edge_density))
        return cls(params, n_nodes, n_features, latent)

    @property
    def n_features_out(self) -> int:
        return self.n_nodes * self.n_features

    def raw(self, z, params=None) -> Tensor:
        """Output vector: features followed by upper-triangle adjacency entries."""
        params = params if params is not None else [Tensor(p, _check=False) for p in self.params]
        h = Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1), _check=False)
        for i in range(0, len(params), 2):
            h = ad.add(ad.matmul(h, params[i]), params[i + 1])
            if i < len(params) - 2:
                h = ad.relu(h)
        return ad.reshape(h, (-1,))

    def squash(self, raw: np.ndarray) -> np.ndarray:
        """Map a raw output vector to the graph vector: adjacency part through a sigmoid."""
        out = raw.copy()
        k = self.n_features_out
        out[k:] = 1.0 / (1.0 + np.exp(-raw[k:]))
        return out

    def unpack(self, vec: np.ndarray):
        n, k = self.n_nodes, self.n_features_out
        X = vec[:k].reshape(n, self.n_features)
        adj = np.zeros((n, n))
        iu = np.triu_indices(n, k=1)
        adj[iu] = np.clip(vec[k:], 0.0, 1.0)
        return X, adj + adj.T

    def generate(self, z):
        with ad.no_grad():
            return self.unpack(self.squash(self.raw(z).data))


# -- extraction ------------------------------------------------------------------------
class ModelExtractor(BaseEstimator):
    """Data-free copy of a posterior oracle into a two-layer GCN.

    Each query round draws a latent, takes ``gen_steps`` generator ascent steps on
    the victim/copy disagreement (gradient w.r.t. the generated graph estimated by
    :func:`zo_gradient`, then back-propagated through the generator) and
    ``sur_steps`` copy steps on cross-entropy to the victim's posteriors.
    """

    def __init__(self, query_nodes=250, query_dim=32, queries=100, gen_steps=2, sur_steps=5, gen_lr=1e-6,
                 sur_lr=1e-3, m=64, eps=1e-4, hidden=256, latent=64, retries=1, seed=0):
        self.query_nodes = query_nodes
        self.query_dim = query_dim
        self.queries = queries
        self.gen_steps = gen_steps
        self.sur_steps = sur_steps
        self.gen_lr = gen_lr
        self.sur_lr = sur_lr
        self.m = m
        self.eps = eps
        self.hidden = hidden
        self.latent = latent
        self.retries = retries
        self.seed = seed

    def _validate(self, oracle) -> None:
        for name in ("query_nodes", "query_dim", "queries", "gen_steps", "sur_steps", "m", "hidden", "latent"):
            check_positive(getattr(self, name), name, integer=True)
        for name in ("gen_lr", "sur_lr", "eps"):
            check_positive(getattr(self, name), name)
        if self.query_dim != oracle.n_features:
            raise ValueError(f"query_dim {self.query_dim} does not match the oracle's {oracle.n_features} features")

    def fit(self, oracle):
        self._validate(oracle)
        rng = np.random.default_rng(self.seed)
        n_cls = oracle.n_classes
        gen = GeneratorState.init(self.query_nodes, self.query_dim, self.latent, seed=self.seed)
        copy = ModelState("GCN", self.query_dim, self.hidden, n_cls,
                          init_params("GCN", self.query_dim, self.hidden, n_cls, self.seed + 1), self.seed + 1)
        copy_arrays = copy.arrays()
        gen_opt = AdamW(gen.params, lr=self.gen_lr, weight_decay=0.0)
        copy_opt = AdamW(copy_arrays, lr=self.sur_lr, weight_decay=0.0)
        history = []

        def copy_posteriors(X, adj):
            with ad.no_grad():
                logits, _ = forward("GCN", copy.tensors(), Tensor(X, _check=False),
                                    Propagator(Tensor(adj, _check=False), "GCN"))
                return ad.row_softmax(logits).data

        def gap(vec):
            X, adj = gen.unpack(vec)
            return disagreement(_ask(oracle, X, adj, self.retries), copy_posteriors(X, adj))

        for q in range(self.queries):
            z = rng.standard_normal(self.latent)
            for s in range(self.gen_steps):
                params = [Tensor(p, requires_grad=True, _check=False) for p in gen.params]
                raw = gen.raw(z, params)
                vec = gen.squash(raw.data)
                g_vec = zo_gradient(gap, vec, self.m, self.eps, seed=int(rng.integers(2**31)))
                # chain through the sigmoid on the adjacency part
                k = gen.n_features_out
                g_raw = g_vec.copy()
                g_raw[k:] *= vec[k:] * (1.0 - vec[k:])
                surrogate = ad.tsum(ad.mul(raw, Tensor(g_raw, _check=False)))
                grads = ad.grad(surrogate, params)
                gen_opt.step([-g.data for g in grads])
            X, adj = gen.generate(z)
            _check_relaxed(adj)
            target = _ask(oracle, X, adj, self.retries)
            prop = Propagator(Tensor(adj, _check=False), "GCN")
            Xt = Tensor(X, _check=False)
            for _ in range(self.sur_steps):
                params = [Tensor(a, requires_grad=True, _check=False) for a in copy_arrays]
                logits, _ = forward("GCN", params, Xt, prop)
                loss = ad.mul(ad.tsum(ad.mul(ad.log_softmax(logits), Tensor(target, _check=False))),
                              -1.0 / len(target))
                grads = ad.grad(loss, params)
                copy_opt.step([g.data for g in grads])
            history.append(float(loss.data))
        self.surrogate_ = copy
        self.generator_ = gen
        self.loss_history_ = history
        return self


def semantic_loss(X, edges_or_adj, y_rec, surrogate: ModelState) -> float:
    """Mean cross-entropy of the surrogate's predictions on a region against its known labels."""
    X = np.asarray(X, dtype=np.float64)
    adj = edges_or_adj
    if not (isinstance(adj, np.ndarray) and adj.ndim == 2 and adj.shape == (len(X), len(X))
            and adj.dtype.kind == "f"):
        adj = edge_adjacency(len(X), adj)
    else:
        adj = Tensor(adj, _check=False)
    with ad.no_grad():
        logits, _ = forward(surrogate.backbone, surrogate.tensors(), Tensor(X, _check=False),
                            Propagator(adj, surrogate.backbone))
        return float(cross_entropy(logits, np.asarray(y_rec)).data)


def probe_gradient(model: ModelState, oracle, X, adj, retries: int = 1) -> GradientVector:
    """Gradient of a copy's loss on a probe graph labelled by the victim it imitates."""
    labels = _ask(oracle, X, adj, retries).argmax(axis=1)
    params = model.tensors(requires_grad=True)
    logits, _ = forward(model.backbone, params, Tensor(X, _check=False),
                        Propagator(Tensor(adj, _check=False), model.backbone))
    grads = ad.grad(cross_entropy(logits, labels), params)
    return GradientVector(model.layout, np.concatenate([g.data.reshape(-1) for g in grads]))


class BlackBoxReconstructor(BaseEstimator):
    """End-to-end query-only attack.

    ``extraction`` and ``attack`` are parameter dicts for :class:`ModelExtractor`
    and :class:`RegionReconstructor`. ``alpha3=None`` picks 50 for one deleted node and
    5000 otherwise.
    """

    def __init__(self, extraction=None, attack=None, alpha3=None, probe_seed=0):
        self.extraction = extraction
        self.attack = attack
        self.alpha3 = alpha3
        self.probe_seed = probe_seed

    def default_alpha3(self, counts: UnlearnCounts) -> float:
        if self.alpha3 is not None:
            return float(self.alpha3)
        return 50.0 if counts.n_deleted == 1 else 5000.0

    def extract(self, oracle) -> ModelExtractor:
        return ModelExtractor(**(self.extraction or {})).fit(oracle)

    def inputs(self, oracle_ori, oracle_un, counts: UnlearnCounts, copy_ori: ModelExtractor | None = None,
               copy_un: ModelExtractor | None = None) -> AttackInputs:
        copy_ori = copy_ori or self.extract(oracle_ori)
        copy_un = copy_un or self.extract(oracle_un)
        z = np.random.default_rng(self.probe_seed).standard_normal(copy_ori.generator_.latent)
        X, adj = copy_ori.generator_.generate(z)
        g_ori = probe_gradient(copy_ori.surrogate_, oracle_ori, X, adj)
        g_un = probe_gradient(copy_un.surrogate_, oracle_un, X, adj)
        self.copies_ = (copy_ori, copy_un)
        return AttackInputs(copy_ori.surrogate_, g_ori, g_un, counts)

    def fit(self, oracle_ori, oracle_un, counts: UnlearnCounts, copy_ori=None, copy_un=None, **attack_overrides):
        inputs = self.inputs(oracle_ori, oracle_un, counts, copy_ori, copy_un)
        params = dict(self.attack or {}, **attack_overrides)
        params["alpha3"] = self.default_alpha3(counts)
        self.inputs_ = inputs
        self.result_ = RegionReconstructor(**params).fit(inputs, semantic=inputs.original).result_
        return self
