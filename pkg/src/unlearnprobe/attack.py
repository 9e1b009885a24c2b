"""White-box reconstruction of a deleted graph region from a gradient difference.

A dummy region (features, plus a relaxed adjacency when several nodes were
deleted) is optimised so that the gradient difference it induces under the
original model matches the observed one. The objective combines gradient
matching, a diagonal-Fisher curvature penalty and Laplacian smoothness.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tensor
from .graph import edge_adjacency
from .gnn import DENSE_LIMIT, GradientVector, ModelState, Propagator, cross_entropy, forward
from .optim import AdamW, MultiStepSchedule, decay_milestones
from .unlearn import UnlearnCounts, UnlearnResult
from .validation import check_choice, check_positive

MODES = ("single", "multi")


class AttackDivergedError(FloatingPointError):
    """The attack objective became NaN or infinite; ``trace`` holds the losses so far."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = list(trace)


# -- dummy region ------------------------------------------------------------------
@dataclass
class DummyGraph:
    """Trainable stand-in for the deleted region.

    ``edges`` is set in single mode (fixed star, local indices); ``adj`` is
    the relaxed symmetric matrix in multi mode.
    """

    X: np.ndarray
    y: np.ndarray
    n_deleted: int
    edges: np.ndarray | None = None
    adj: np.ndarray | None = None

    @property
    def mode(self) -> str:
        return "single" if self.adj is None else "multi"

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def copy(self) -> "DummyGraph":
        return DummyGraph(self.X.copy(), self.y.copy(), self.n_deleted,
                          None if self.edges is None else self.edges.copy(),
                          None if self.adj is None else self.adj.copy())


def edge_probability(n_nodes: int, n_edges: int) -> float:
    pairs = n_nodes * (n_nodes - 1) // 2
    if pairs == 0:
        return 0.0
    return min(1.0, n_edges / pairs)


def star_topology(n_nodes: int) -> np.ndarray:
    """Node 0 (the deleted node) joined to every other local node."""
    return np.array([(0, j) for j in range(1, n_nodes)], dtype=np.int64).reshape(-1, 2)


def init_dummy(counts: UnlearnCounts, n_features: int, mode: str = "single", seed: int = 0) -> DummyGraph:
    check_choice(mode, "mode", MODES)
    if mode == "single" and counts.n_deleted != 1:
        raise ValueError("single mode needs exactly one deleted node")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((counts.n_nodes, n_features))
    y = np.asarray(counts.labels, dtype=np.int64)
    if mode == "single":
        edges = star_topology(counts.n_nodes)
        if len(edges) != counts.n_edges:
            raise ValueError(f"star on {counts.n_nodes} nodes has {len(edges)} edges, counts say {counts.n_edges}")
        return DummyGraph(X, y, 1, edges=edges)
    p = edge_probability(counts.n_nodes, counts.n_edges)
    upper = np.triu(rng.random((counts.n_nodes, counts.n_nodes)) < p, k=1).astype(np.float64)
    return DummyGraph(X, y, counts.n_deleted, adj=upper + upper.T)


def project(adj: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], symmetrise and zero the diagonal."""
    a = np.clip(adj, 0.0, 1.0)
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 0.0)
    return a


def finalize_edges(adj: np.ndarray, n_edges: int, seed: int = 0) -> np.ndarray:
    """Sample an edge set from edge probabilities and repair it to exactly ``n_edges``.

    Missing edges are added in decreasing probability, surplus ones dropped in
    increasing probability; ties go to the lower pair index.
    """
    n = adj.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    if n_edges > len(iu):
        raise ValueError(f"edge budget {n_edges} exceeds the {len(iu)} possible pairs")
    prob = np.clip(adj[iu, ju], 0.0, 1.0)
    chosen = np.random.default_rng(seed).random(len(prob)) < prob
    surplus = int(chosen.sum()) - n_edges
    if surplus > 0:
        present = np.flatnonzero(chosen)
        drop = present[np.lexsort((present, prob[present]))[:surplus]]
        chosen[drop] = False
    elif surplus < 0:
        missing = np.flatnonzero(~chosen)
        add = missing[np.lexsort((missing, -prob[missing]))[:-surplus]]
        chosen[add] = True
    return np.stack([iu[chosen], ju[chosen]], axis=1).astype(np.int64)


# -- objective pieces ---------------------------------------------------------------
def dummy_grad_diff(state: ModelState, params: list, X: Tensor, prop: Propagator, y,
                    grad_unlearned) -> Tensor:
    """Synthetic gradient difference: the dummy region's loss gradient under ``state``
    minus the released unlearned-model gradient. Differentiable in ``X`` and the
    propagator's adjacency."""
    logits, _ = forward(state.backbone, params, X, prop)
    loss = cross_entropy(logits, y)
    grads = ad.grad(loss, params, create_graph=True)
    flat = ad.concat([ad.reshape(g, (-1,)) for g in grads])
    g_un = grad_unlearned.flat if isinstance(grad_unlearned, GradientVector) else np.asarray(grad_unlearned)
    return ad.sub(flat, Tensor(g_un, _check=False))


def grad_match_loss(d_syn, d_obs) -> Tensor:
    """``(1 - cos) + mean squared difference``; a zero-norm side makes the cosine term 1."""
    d_syn = ad.as_tensor(d_syn)
    d_obs = ad.as_tensor(d_obs)
    if d_syn.shape != d_obs.shape:
        raise ValueError(f"gradient vectors differ in length: {d_syn.shape} vs {d_obs.shape}")
    diff = ad.sub(d_syn, d_obs)
    mse = ad.mean(ad.mul(diff, diff))
    if not (np.any(d_syn.data) and np.any(d_obs.data)):
        return ad.add(mse, 1.0)
    # 1 - cos(a, b) written as |a/|a| - b/|b||^2 / 2, whose gradient vanishes exactly at a == b;
    # both sides are normalised by the same operations so equal inputs give exactly 0
    u = ad.div(d_syn, ad.sqrt(ad.tsum(ad.mul(d_syn, d_syn))))
    v = ad.div(d_obs, ad.sqrt(ad.tsum(ad.mul(d_obs, d_obs))))
    gap = ad.sub(u, v)
    return ad.add(ad.mul(ad.tsum(ad.mul(gap, gap)), 0.5), mse)


def degenerate_cosine(d_syn, d_obs) -> bool:
    """True when :func:`grad_match_loss` fell back to a cosine term of 1."""
    a = d_syn.data if isinstance(d_syn, Tensor) else np.asarray(d_syn)
    b = d_obs.data if isinstance(d_obs, Tensor) else np.asarray(d_obs)
    return not (np.any(a) and np.any(b))


def curvature_loss(d_syn, d_obs, fisher_diag) -> Tensor:
    fisher_diag = np.asarray(fisher_diag, dtype=np.float64)
    if np.any(fisher_diag <= 0):
        raise ValueError("Fisher diagonal must be strictly positive")
    diff = ad.sub(d_syn, d_obs)
    return ad.tsum(ad.mul(ad.mul(diff, diff), Tensor(1.0 / fisher_diag, _check=False)))


def smooth_loss(X, topology) -> Tensor:
    """``tr(Xᵀ L X)`` for a fixed edge array or a relaxed adjacency (ndarray or Tensor)."""
    X = ad.as_tensor(X)
    if isinstance(topology, Tensor) or (isinstance(topology, np.ndarray) and topology.ndim == 2
                                         and topology.shape[0] == topology.shape[1] == X.shape[0]
                                         and topology.dtype.kind == "f"):
        A = ad.as_tensor(topology)
        deg = ad.tsum(A, axis=1, keepdims=True)
        sq = ad.tsum(ad.mul(X, X), axis=1, keepdims=True)
        return ad.sub(ad.tsum(ad.mul(deg, sq)), ad.trace(ad.matmul(ad.transpose(X), ad.matmul(A, X))))
    e = np.asarray(topology, dtype=np.int64).reshape(-1, 2)
    lap = laplacian(X.shape[0], e)
    return ad.trace(ad.matmul(ad.transpose(X), ad.spmm(lap, X)))


def laplacian(n: int, edges) -> np.ndarray | sp.csr_matrix:
    a = edge_adjacency(n, edges)
    lap = (sp.diags(np.asarray(a.sum(axis=1)).ravel()) - a).tocsr()
    return lap.toarray() if n <= DENSE_LIMIT else lap


def empirical_fisher_diag(state: ModelState, X, adj, y, damping: float = 1e-4, params=None) -> np.ndarray:
    """Mean of squared per-node log-likelihood gradients, plus ``damping``."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) < 1:
        raise ValueError("need at least one node")
    params = state.tensors(requires_grad=True) if params is None else params
    Xt = X if isinstance(X, Tensor) else Tensor(X)
    Xt = Tensor(Xt.data, _check=False)
    if isinstance(adj, Tensor):
        adj = Tensor(adj.data, _check=False)
    prop = adj if isinstance(adj, Propagator) else Propagator(adj, state.backbone)
    logits, _ = forward(state.backbone, params, Xt, prop)
    logp = ad.log_softmax(logits)
    acc = np.zeros(sum(int(np.prod(s)) for _, s in state.layout))
    for i, yi in enumerate(y):
        pick = np.zeros(logp.shape)
        pick[i, yi] = 1.0
        gi = ad.grad(ad.tsum(ad.mul(logp, Tensor(pick, _check=False))), params)
        flat = np.concatenate([g.data.reshape(-1) for g in gi])
        acc += flat * flat
    return acc / len(y) + damping


# -- results ------------------------------------------------------------------------
@dataclass
class AttackResult:
    X: np.ndarray
    edges: np.ndarray
    loss_trace: list
    iterations: int
    mode: str
    early_stopped: bool = False
    adj_prob: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "features.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"f{j}" for j in range(self.X.shape[1])])
            labels = self.config.get("labels", [-1] * len(self.X))
            for i, row in enumerate(self.X):
                w.writerow([i, labels[i]] + [repr(float(v)) for v in row])
        with open(d / "edges.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["src", "dst"])
            w.writerows(self.edges.tolist())
        with open(d / "loss_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            w.writerows([i, repr(float(v))] for i, v in enumerate(self.loss_trace))
        meta = dict(self.config, iterations=self.iterations, mode=self.mode, early_stopped=self.early_stopped)
        (d / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


@dataclass(frozen=True)
class AttackInputs:
    """Everything the white-box attacker holds: both models, the released
    gradients and the deletion counts."""

    original: ModelState
    grad_original: GradientVector
    grad_unlearned: GradientVector
    counts: UnlearnCounts

    @property
    def grad_diff(self) -> GradientVector:
        return self.grad_original - self.grad_unlearned

    @classmethod
    def from_unlearn(cls, res: UnlearnResult, defense=None) -> "AttackInputs":
        g_ori, g_un = res.grad_original, res.grad_unlearned
        if defense is not None:
            g_ori, g_un = defense.release(g_ori, "original"), defense.release(g_un, "unlearned")
        return cls(res.original, g_ori, g_un, res.counts)


class _Objective:
    """``L_grad + a1 L_curv + a2 L_smooth (+ a3 L_semantic)`` with per-run caches."""

    def __init__(self, est: "RegionReconstructor", inputs: AttackInputs, dummy: DummyGraph, semantic=None):
        self.est = est
        self.state = inputs.original
        self.semantic = semantic if est.alpha3 else None
        self.d_obs = Tensor(inputs.grad_diff.flat, _check=False)
        self.g_un = inputs.grad_unlearned
        self.y = dummy.y
        self.fixed = None
        if dummy.adj is None:
            adj = edge_adjacency(dummy.n, dummy.edges)
            self.fixed = {"adj": adj, "lap": laplacian(dummy.n, dummy.edges),
                          "prop": Propagator(adj, self.state.backbone)}
            if self.semantic is not None:
                self.fixed["sem_prop"] = Propagator(adj, self.semantic.backbone)

    def fisher(self, X, A) -> np.ndarray:
        adj = self.fixed["prop"] if self.fixed else Tensor(A, _check=False)
        return empirical_fisher_diag(self.state, X, adj, self.y, self.est.fisher_damping)

    def __call__(self, X: Tensor, A, fisher):
        est = self.est
        params = self.state.tensors(requires_grad=True)
        prop = self.fixed["prop"] if A is None else Propagator(A, self.state.backbone)
        d_syn = dummy_grad_diff(self.state, params, X, prop, self.y, self.g_un)
        parts = {"grad": grad_match_loss(d_syn, self.d_obs)}
        total = parts["grad"]
        if est.alpha1:
            parts["curv"] = curvature_loss(d_syn, self.d_obs, fisher)
            total = ad.add(total, ad.mul(parts["curv"], est.alpha1))
        if est.alpha2:
            if A is None:
                parts["smooth"] = ad.trace(ad.matmul(ad.transpose(X), ad.spmm(self.fixed["lap"], X)))
            else:
                parts["smooth"] = smooth_loss(X, A)
            total = ad.add(total, ad.mul(parts["smooth"], est.alpha2))
        if self.semantic is not None:
            sem = self.semantic
            sem_prop = self.fixed["sem_prop"] if A is None else Propagator(A, sem.backbone)
            logits, _ = forward(sem.backbone, sem.tensors(), X, sem_prop)
            parts["semantic"] = cross_entropy(logits, self.y)
            total = ad.add(total, ad.mul(parts["semantic"], est.alpha3))
        return total, parts


# -- optimiser ----------------------------------------------------------------------
class RegionReconstructor(BaseEstimator):
    """Gradient-matching reconstruction of a deleted region.

    Parameters
    ----------
    alpha1, alpha2 : float
        Weights of the curvature and smoothness terms.
    alpha3 : float
        Weight of an extra semantic term; only used when ``fit`` receives a
        ``semantic`` model (the black-box pipeline).
    lr, max_iters, decay_points, decay_factor, weight_decay
        AdamW step size, iteration cap and multi-step schedule (fractions of
        ``max_iters``).
    iter_fraction : float
        Run only ``ceil(iter_fraction * max_iters)`` iterations; the schedule
        stays relative to ``max_iters``.
    fisher_damping, fisher_every
        Damping of the diagonal Fisher and how often it is refreshed.
    patience : int
        Stop once the loss has not improved for this many iterations.
    mode : {"auto", "single", "multi"}
        ``auto`` picks ``single`` for one deleted node.
    """

    def __init__(self, alpha1=1.0, alpha2=1e-5, alpha3=0.0, lr=0.01, max_iters=10000,
                 decay_points=(3 / 8, 5 / 8, 7 / 8), decay_factor=0.5, weight_decay=0.01, iter_fraction=1.0,
                 fisher_damping=1e-4, fisher_every=50, patience=1000, mode="auto", seed=0):
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.alpha3 = alpha3
        self.lr = lr
        self.max_iters = max_iters
        self.decay_points = decay_points
        self.decay_factor = decay_factor
        self.weight_decay = weight_decay
        self.iter_fraction = iter_fraction
        self.fisher_damping = fisher_damping
        self.fisher_every = fisher_every
        self.patience = patience
        self.mode = mode
        self.seed = seed

    def _validate(self) -> None:
        for name in ("alpha1", "alpha2", "alpha3", "weight_decay"):
            check_positive(getattr(self, name), name, strict=False)
        check_positive(self.lr, "lr")
        check_positive(self.max_iters, "max_iters", strict=False, integer=True)
        check_positive(self.fisher_damping, "fisher_damping")
        check_positive(self.fisher_every, "fisher_every", integer=True)
        check_positive(self.patience, "patience", integer=True)
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must lie in (0, 1)")
        if not 0 <= self.iter_fraction <= 1:
            raise ValueError("iter_fraction must lie in [0, 1]")
        check_choice(self.mode, "mode", ("auto",) + MODES)

    def resolved_mode(self, counts: UnlearnCounts) -> str:
        if self.mode != "auto":
            return self.mode
        return "single" if counts.n_deleted == 1 else "multi"

    @property
    def n_iters(self) -> int:
        return int(math.ceil(self.iter_fraction * self.max_iters - 1e-9))

    def objective(self, inputs: AttackInputs, dummy: DummyGraph, semantic: ModelState | None = None):
        return _Objective(self, inputs, dummy, semantic)

    def fit(self, inputs: AttackInputs, init: DummyGraph | None = None, semantic: ModelState | None = None):
        self._validate()
        counts = inputs.counts
        mode = self.resolved_mode(counts)
        dummy = (init.copy() if init is not None
                 else init_dummy(counts, inputs.original.n_features, mode, self.seed))
        if dummy.mode != mode:
            raise ValueError(f"initial dummy is {dummy.mode}-mode, attack runs in {mode} mode")
        objective = self.objective(inputs, dummy, semantic)
        X, A = dummy.X, dummy.adj
        opt = AdamW([X] if A is None else [X, A], lr=self.lr, weight_decay=self.weight_decay)
        sched = MultiStepSchedule(opt, decay_milestones(self.max_iters, self.decay_points), self.decay_factor)
        trace = []
        best, best_it, early = math.inf, 0, False
        fisher = None
        for it in range(self.n_iters):
            if self.alpha1 and it % self.fisher_every == 0:
                fisher = objective.fisher(X, A)
            Xt = Tensor(X, requires_grad=True, _check=False)
            At = None if A is None else Tensor(A, requires_grad=True, _check=False)
            total, _ = objective(Xt, At, fisher)
            value = float(total.data)
            if not math.isfinite(value):
                raise AttackDivergedError(f"attack loss became non-finite at iteration {it}", trace)
            trace.append(value)
            if value < best:
                best, best_it = value, it
            elif it - best_it >= self.patience:
                early = True
                break
            grads = ad.grad(total, [Xt] if At is None else [Xt, At])
            opt.step([g.data for g in grads])
            sched.step()
            if A is not None:
                A[...] = project(A)
        iterations = len(trace)
        if not trace:
            fisher = objective.fisher(X, A) if self.alpha1 else None
            # still recorded: the matching term differentiates through the model internally
            total, _ = objective(Tensor(X, _check=False), None if A is None else Tensor(A, _check=False), fisher)
            trace.append(float(total.data))
        edges = dummy.edges.copy() if A is None else finalize_edges(A, counts.n_edges, self.seed)
        config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        config["labels"] = [int(v) for v in dummy.y]
        self.result_ = AttackResult(X.copy(), edges, trace, iterations, mode, early,
                                    None if A is None else A.copy(), config)
        return self

    def transform(self, inputs: AttackInputs):
        """Fit and return ``(features, local edge array)`` of the recovered region."""
        res = self.fit(inputs).result_
        return res.X, res.edges


def run_attack(inputs: AttackInputs, **params) -> AttackResult:
    return RegionReconstructor(**params).fit(inputs).result_


def baseline_rand(inputs: AttackInputs, seed: int = 0, **params) -> AttackResult:
    """Gaussian dummy with the attack's initial topology and no optimisation."""
    return RegionReconstructor(**dict(params, seed=seed, iter_fraction=0.0)).fit(inputs).result_


def baseline_fewe(inputs: AttackInputs, seed: int = 0, **params) -> AttackResult:
    """The full attack stopped after the first 1% of its iteration budget."""
    return RegionReconstructor(**dict(params, seed=seed, iter_fraction=0.01)).fit(inputs).result_


def planted_inputs(res: UnlearnResult) -> tuple:
    """Observation generated by the attacker's own forward model at the true region.

    Returns ``(inputs, truth)`` where ``inputs.grad_original`` is replaced so that the
    observed difference equals the synthetic difference of the ground-truth dummy.
    """
    t = res.target
    mode = "single" if t.n_deleted == 1 else "multi"
    if mode == "single":
        truth = DummyGraph(t.rec_X.copy(), t.rec_y.copy(), 1, edges=star_topology(t.n_nodes))
        adj = edge_adjacency(t.n_nodes, truth.edges)
    else:
        dense = edge_adjacency(t.n_nodes, t.rec_edges).toarray()
        truth = DummyGraph(t.rec_X.copy(), t.rec_y.copy(), t.n_deleted, adj=dense)
        adj = sp.csr_matrix(dense)
    state = res.original
    params = state.tensors(requires_grad=True)
    logits, _ = forward(state.backbone, params, Tensor(truth.X), Propagator(adj, state.backbone))
    g = ad.grad(cross_entropy(logits, truth.y), params)
    g_region = GradientVector(state.layout, np.concatenate([v.data.reshape(-1) for v in g]))
    return AttackInputs(state, g_region, res.grad_unlearned, res.counts), truth
