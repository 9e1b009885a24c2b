"""Defenses applied to a released gradient before anyone else sees it."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .gnn import GradientVector
from .validation import check_choice

KINDS = ("none", "prune", "laplace")


def _flat(gv):
    return gv.flat if isinstance(gv, GradientVector) else np.asarray(gv, dtype=np.float64)


def _wrap(gv, flat):
    return gv.replace(flat) if isinstance(gv, GradientVector) else flat


def prune_gradient(gv, p: float):
    """Zero the ``floor(p * M)`` entries of smallest magnitude (lower index first on ties)."""
    if not 0 <= p < 1:
        raise ValueError(f"prune fraction must lie in [0, 1), got {p!r}")
    flat = _flat(gv).copy()
    n_drop = int(np.floor(p * flat.size))
    if n_drop:
        order = np.lexsort((np.arange(flat.size), np.abs(flat)))
        flat[order[:n_drop]] = 0.0
    return _wrap(gv, flat)


def laplace_gradient(gv, sigma: float, seed: int = 0):
    """Add i.i.d. Laplace(0, sigma) noise to every entry."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    flat = _flat(gv)
    noise = np.random.default_rng(seed).laplace(0.0, sigma, size=flat.shape)
    return _wrap(gv, flat + noise)


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    p: float = 0.9
    sigma: float = 0.007
    seed: int = 0

    def __post_init__(self):
        check_choice(self.kind, "kind", KINDS)
        if self.kind == "prune" and not 0 <= self.p < 1:
            raise ValueError("prune fraction must lie in [0, 1)")
        if self.kind == "laplace" and not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseConfig":
        return cls(**{k: d[k] for k in ("kind", "p", "sigma", "seed") if k in d})

    def release(self, gv, role: str = ""):
        """Apply the defense to one released gradient. ``role`` separates the noise
        streams of the two releasing parties."""
        if self.kind == "prune":
            return prune_gradient(gv, self.p)
        if self.kind == "laplace":
            return laplace_gradient(gv, self.sigma, self.seed * 1_000_003 + zlib.crc32(role.encode()))
        return gv


class GradientDefense(TransformerMixin, BaseEstimator):
    """Transformer view of :class:`DefenseConfig` over flat gradient rows."""

    def __init__(self, kind="none", p=0.9, sigma=0.007, seed=0):
        self.kind = kind
        self.p = p
        self.sigma = sigma
        self.seed = seed

    def fit(self, X=None, y=None):
        self.config_ = DefenseConfig(self.kind, self.p, self.sigma, self.seed)
        return self

    def transform(self, X):
        cfg = self.config_
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.vstack([cfg.release(row, str(i)) for i, row in enumerate(X)])
