"""Reconstruction quality: feature error, distributional distances, graph kernel and
prediction agreement under a fixed model."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans

from .graph import edge_adjacency
from .gnn import ModelState, Propagator, forward
from .autodiff import Tensor, no_grad, row_softmax

METRIC_COLUMNS = ("nrmse", "ed", "pmgk", "att_acc", "att_fid", "pwd")


class MetricWarning(UserWarning):
    pass


def rnmse(X_hat, X_true) -> float:
    """Mean over rows of ``|x_hat - x| / |x|``; rows with ``|x| = 0`` are skipped with a warning."""
    X_hat = np.asarray(X_hat, dtype=np.float64)
    X_true = np.asarray(X_true, dtype=np.float64)
    if X_hat.shape != X_true.shape:
        raise ValueError(f"shape mismatch {X_hat.shape} vs {X_true.shape}")
    denom = np.linalg.norm(X_true, axis=1)
    ok = denom > 0
    if not ok.all():
        warnings.warn(f"rnmse skipped {int((~ok).sum())} all-zero row(s)", MetricWarning, stacklevel=2)
    if not ok.any():
        return float("nan")
    return float(np.mean(np.linalg.norm(X_hat - X_true, axis=1)[ok] / denom[ok]))


def assignment_w2(A, B) -> float:
    """Squared 2-Wasserstein distance between two equal-size uniform point clouds."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape != B.shape:
        raise ValueError(f"point clouds must have equal shape, got {A.shape} and {B.shape}")
    cost = cdist(A, B, "sqeuclidean")
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum() / len(A))


def embedding_w2(H_rec, H_true) -> float:
    return assignment_w2(H_rec, H_true)


def posterior_w2(P_rec, P_true) -> float:
    return assignment_w2(P_rec, P_true)


def _farthest_point_init(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(len(Z)))]
    dist = np.sum((Z - Z[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(dist))
        idx.append(nxt)
        dist = np.minimum(dist, np.sum((Z - Z[nxt]) ** 2, axis=1))
    return Z[idx]


def discretize(Z, k: int, n_iter: int = 50, seed: int = 0):
    """K-means labels for the rows of ``Z``. Returns ``(labels, flagged)``.

    An empty cluster triggers one re-seeded attempt; if that also leaves a
    cluster empty the labels are kept and ``flagged`` is True.
    """
    Z = np.asarray(Z, dtype=np.float64)
    k_eff = min(k, len(np.unique(Z, axis=0)))
    rng = np.random.default_rng(seed)
    labels = None
    for _ in range(2):
        init = _farthest_point_init(Z, k_eff, rng)
        km = KMeans(n_clusters=k_eff, init=init, n_init=1, max_iter=n_iter, algorithm="lloyd", random_state=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            labels = km.fit_predict(Z)
        if len(np.unique(labels)) == k_eff:
            return labels, k_eff < k
    return labels, True


def pyramid_intersections(a, b, k: int, levels: int) -> list:
    """Histogram intersections from the finest level (``k`` bins) to the coarsest.

    Level ``j`` merges contiguous labels into ``ceil(k / 2**j)`` bins.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    out = []
    for j in range(levels + 1):
        nb = -(-k // 2**j)
        ha = np.bincount(a // 2**j, minlength=nb)
        hb = np.bincount(b // 2**j, minlength=nb)
        out.append(float(np.minimum(ha, hb).sum()))
    return out


def pyramid_kernel(a, b, k: int, levels: int) -> float:
    """``I_0 + sum_j (I_j - I_{j-1}) / 2**j``, level 0 finest."""
    inter = pyramid_intersections(a, b, k, levels)
    return inter[0] + sum((inter[j] - inter[j - 1]) / 2**j for j in range(1, levels + 1))


def pmgk(H_rec, H_true, k: int, levels: int = 4, n_iter: int = 50, seed: int = 0) -> float:
    """Normalised pyramid-match kernel between two embedding sets."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    H_rec = np.asarray(H_rec, dtype=np.float64)
    H_true = np.asarray(H_true, dtype=np.float64)
    labels, flagged = discretize(np.vstack([H_rec, H_true]), k, n_iter, seed)
    if flagged:
        warnings.warn("pmgk clustering produced fewer effective clusters than requested", MetricWarning,
                      stacklevel=2)
    a, b = labels[: len(H_rec)], labels[len(H_rec):]
    kab = pyramid_kernel(a, b, k, levels)
    kaa = pyramid_kernel(a, a, k, levels)
    kbb = pyramid_kernel(b, b, k, levels)
    return float(kab / np.sqrt(kaa * kbb))


# -- model-based metrics ------------------------------------------------------------
def region_outputs(model: ModelState, X, edges):
    """``(posteriors, hidden embeddings)`` of ``model`` on an isolated region graph."""
    X = np.asarray(X, dtype=np.float64)
    with no_grad():
        logits, h = forward(model.backbone, model.tensors(), Tensor(X, _check=False),
                            Propagator(edge_adjacency(len(X), edges), model.backbone))
        return row_softmax(logits).data, h.data


def att_accuracy(X_hat, edges_hat, y_rec, model: ModelState) -> float:
    P, _ = region_outputs(model, X_hat, edges_hat)
    return float(np.mean(P.argmax(axis=1) == np.asarray(y_rec)))


def att_fidelity(X_hat, edges_hat, X_true, edges_true, model: ModelState) -> float:
    P_hat, _ = region_outputs(model, X_hat, edges_hat)
    P_true, _ = region_outputs(model, X_true, edges_true)
    return float(np.mean(P_hat.argmax(axis=1) == P_true.argmax(axis=1)))


@dataclass
class MetricReport:
    nrmse: float
    ed: float
    pmgk: float
    att_acc: float
    att_fid: float
    pwd: float
    seed: int = 0
    policy: str = ""
    mode: str = ""

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(X_hat, edges_hat, target, model: ModelState, *, k=None, levels: int = 4, seed: int = 0,
             policy: str = "", mode: str = "") -> MetricReport:
    """All six metrics for a recovered region against a :class:`RecoveryTarget`."""
    P_hat, H_hat = region_outputs(model, X_hat, edges_hat)
    P_true, H_true = region_outputs(model, target.rec_X, target.rec_edges)
    y = np.asarray(target.rec_y)
    return MetricReport(
        nrmse=rnmse(X_hat, target.rec_X),
        ed=embedding_w2(H_hat, H_true),
        pmgk=pmgk(H_hat, H_true, k or model.n_classes, levels, seed=seed),
        att_acc=float(np.mean(P_hat.argmax(axis=1) == y)),
        att_fid=float(np.mean(P_hat.argmax(axis=1) == P_true.argmax(axis=1))),
        pwd=posterior_w2(P_hat, P_true),
        seed=seed, policy=policy, mode=mode,
    )
