"""Attributed undirected graphs: ingestion, synthesis, splits and deletion targets."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .validation import check_choice, check_fraction, check_graph, check_request

POLICIES = ("random", "worst")


class GraphParseError(ValueError):
    """Malformed node or edge file; the message carries the offending line."""


@dataclass(eq=False)
class Graph:
    """Undirected attributed graph with canonical ``u < v`` edge pairs.

    ``node_ids`` maps local indices back to the ids of the graph this one was
    derived from (identity for freshly loaded or generated graphs).
    """

    X: np.ndarray
    y: np.ndarray
    edges: np.ndarray
    n_classes: int
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    node_ids: np.ndarray | None = None
    _csr: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.node_ids is None:
            self.node_ids = np.arange(self.n)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency in CSR form (no self-loops)."""
        if self._csr is None:
            n = self.n
            u, v = self.edges[:, 0], self.edges[:, 1]
            data = np.ones(2 * len(u))
            a = sp.csr_matrix((data, (np.r_[u, v], np.r_[v, u])), shape=(n, n))
            a.sort_indices()
            self._csr = a
        return self._csr

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=np.int64)
        np.add.at(deg, self.edges.reshape(-1), 1)
        return deg

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency()
        return a.indices[a.indptr[v]:a.indptr[v + 1]].copy()

    def with_masks(self, train, val, test) -> "Graph":
        return replace(self, train_mask=train, val_mask=val, test_mask=test, _csr=self._csr)


@dataclass(frozen=True)
class DeletionRequest:
    deleted_nodes: tuple
    policy: str = "random"

    def __post_init__(self):
        object.__setattr__(self, "deleted_nodes", tuple(int(v) for v in self.deleted_nodes))
        check_choice(self.policy, "policy", POLICIES)
        if not self.deleted_nodes:
            raise ValueError("deletion request is empty")

    @property
    def size(self) -> int:
        return len(self.deleted_nodes)


@dataclass(frozen=True)
class RecoveryTarget:
    """Ground-truth deletion region: deleted nodes first, then their 1-hop neighbours.

    ``rec_edges`` are local index pairs into ``rec_nodes``.
    """

    rec_nodes: np.ndarray
    n_deleted: int
    rec_edges: np.ndarray
    rec_X: np.ndarray
    rec_y: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.rec_nodes)

    @property
    def n_edges(self) -> int:
        return len(self.rec_edges)


def canonical_edges(pairs, n: int | None = None) -> np.ndarray:
    """Sort each pair to ``u < v``, sort rows, reject loops and duplicates."""
    e = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if np.any(e[:, 0] == e[:, 1]):
        raise ValueError("self-loop in edge list")
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e = e[order]
    if len(e) > 1 and np.any(np.all(e[1:] == e[:-1], axis=1)):
        raise ValueError("duplicate edge in edge list")
    if n is not None and len(e) and e.max() >= n:
        raise ValueError("edge references a node outside the graph")
    return e


# -- CSV ingestion ------------------------------------------------------------
def load_graph(node_file, edge_file) -> Graph:
    """Read ``id,label,f0..`` node rows and ``src,dst`` edge rows."""
    node_file, edge_file = Path(node_file), Path(edge_file)
    with node_file.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["id", "label"]:
            raise GraphParseError(f"{node_file}:1: header must start with 'id,label'")
        n_feat = len(header) - 2
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_feat + 2:
                raise GraphParseError(f"{node_file}:{lineno}: expected {n_feat + 2} fields, got {len(row)}")
            try:
                nid, label = int(row[0]), int(row[1])
                feats = [float(x) for x in row[2:]]
            except ValueError as exc:
                raise GraphParseError(f"{node_file}:{lineno}: non-numeric field ({exc})") from None
            if not np.isfinite(feats).all():
                raise GraphParseError(f"{node_file}:{lineno}: non-finite feature")
            if nid in rows:
                raise GraphParseError(f"{node_file}:{lineno}: duplicate node id {nid}")
            rows[nid] = (label, feats)
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise GraphParseError(f"{node_file}: node ids must be contiguous 0..{n - 1}")
    y = np.array([rows[i][0] for i in range(n)], dtype=np.int64)
    X = np.array([rows[i][1] for i in range(n)], dtype=np.float64).reshape(n, n_feat)
    if n and y.min() < 0:
        raise GraphParseError(f"{node_file}: negative label")

    seen = set()
    pairs = []
    with edge_file.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["src", "dst"]:
            raise GraphParseError(f"{edge_file}:1: header must be 'src,dst'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                u, v = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise GraphParseError(f"{edge_file}:{lineno}: malformed edge row {row!r}") from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphParseError(f"{edge_file}:{lineno}: dangling node id in ({u}, {v})")
            if u == v:
                raise GraphParseError(f"{edge_file}:{lineno}: self-loop on node {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise GraphParseError(f"{edge_file}:{lineno}: duplicate edge {key}")
            seen.add(key)
            pairs.append(key)
    g = Graph(X=X, y=y, edges=canonical_edges(pairs, n), n_classes=int(y.max()) + 1 if n else 0)
    check_graph(g)
    return g


def save_graph(g: Graph, node_file, edge_file) -> None:
    with Path(node_file).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"f{j}" for j in range(g.n_features)])
        for i in range(g.n):
            w.writerow([i, int(g.y[i])] + [repr(float(x)) for x in g.X[i]])
    with Path(edge_file).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        w.writerows(g.edges.tolist())


# -- synthetic graphs -----------------------------------------------------------
def synth_graph(n: int, classes: int, D: int, p_in: float, p_out: float, seed: int = 0) -> Graph:
    """Planted-partition graph with class-conditional Gaussian features.

    Class ``c`` has mean ``2 * e_(c mod D)`` and unit variance. Isolated nodes
    are attached to a random node of the same class.
    """
    if classes < 1 or D < 1:
        raise ValueError("classes and D must be positive")
    if n < 2 * classes:
        raise ValueError(f"need n >= 2*classes, got n={n}, classes={classes}")
    if not (0 <= p_out < p_in <= 1):
        raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}")
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % classes)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(y[iu] == y[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = {(int(a), int(b)) for a, b in zip(iu[keep], ju[keep])}
    deg = np.zeros(n, dtype=np.int64)
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    for u in np.flatnonzero(deg == 0):
        same = np.flatnonzero((y == y[u]) & (np.arange(n) != u))
        w = int(rng.choice(same))
        edges.add((min(u, w), max(u, w)))
        deg[u] += 1
        deg[w] += 1
    X = rng.standard_normal((n, D))
    X[np.arange(n), y % D] += 2.0
    g = Graph(X=X, y=y, edges=canonical_edges(sorted(edges), n), n_classes=classes)
    check_graph(g)
    return g


def split(g: Graph, per_class_train: int = 20, per_class_val: int = 30, seed: int = 0) -> Graph:
    """Per-class random train/val split; everything else becomes test."""
    if per_class_train < 1:
        raise ValueError("per_class_train must be >= 1 (empty training set)")
    if per_class_val < 0:
        raise ValueError("per_class_val must be >= 0")
    rng = np.random.default_rng(seed)
    train = np.zeros(g.n, dtype=bool)
    val = np.zeros(g.n, dtype=bool)
    for c in range(g.n_classes):
        idx = np.flatnonzero(g.y == c)
        if len(idx) < per_class_train + per_class_val:
            raise ValueError(f"class {c} has {len(idx)} nodes, needs {per_class_train + per_class_val}")
        idx = rng.permutation(idx)
        train[idx[:per_class_train]] = True
        val[idx[per_class_train:per_class_train + per_class_val]] = True
    return g.with_masks(train, val, ~(train | val))


def n_targets(n_train: int, k_fraction: float) -> int:
    return int(round(k_fraction * n_train))


def select_targets(g: Graph, k_fraction: float, policy: str = "random", seed: int = 0) -> list:
    """One single-node :class:`DeletionRequest` per selected training node.

    ``worst`` takes the highest-degree training nodes (ties by ascending id).
    """
    check_fraction(k_fraction, "k_fraction")
    check_choice(policy, "policy", POLICIES)
    if g.train_mask is None:
        raise ValueError("graph has no training mask; call split() first")
    train = np.flatnonzero(g.train_mask)
    k = n_targets(len(train), k_fraction)
    if k == 0:
        raise ValueError("selection is empty; increase k_fraction")
    if policy == "worst":
        nodes = ranked_by_degree(g, train)[:k]
    else:
        nodes = np.random.default_rng(seed).choice(train, size=k, replace=False)
    return [DeletionRequest((int(v),), policy) for v in nodes]


def ranked_by_degree(g: Graph, nodes) -> np.ndarray:
    nodes = np.asarray(nodes)
    deg = g.degrees()[nodes]
    return nodes[np.lexsort((nodes, -deg))]


def select_groups(g: Graph, size: int, n_groups: int = 5, policy: str = "random", seed: int = 0) -> list:
    """Disjoint multi-node requests.

    ``worst`` ranks the top ``size * n_groups`` training nodes by degree and
    deals consecutive blocks of ``size`` into one request each.
    """
    check_choice(policy, "policy", POLICIES)
    train = np.flatnonzero(g.train_mask)
    need = size * n_groups
    if size < 1 or need > len(train):
        raise ValueError(f"cannot form {n_groups} disjoint groups of {size} from {len(train)} training nodes")
    if policy == "worst":
        pool = ranked_by_degree(g, train)[:need]
    else:
        pool = np.random.default_rng(seed).choice(train, size=need, replace=False)
    return [DeletionRequest(tuple(int(v) for v in pool[i * size:(i + 1) * size]), policy) for i in range(n_groups)]


def recovery_target(g: Graph, req: DeletionRequest, induced: bool = False) -> RecoveryTarget:
    """Deleted nodes plus their 1-hop neighbours, with the edges touching the deleted set.

    ``induced=True`` keeps every edge among the recovery nodes instead.
    """
    check_request(g, req)
    deleted = list(req.deleted_nodes)
    dset = set(deleted)
    nbrs = set()
    for v in deleted:
        nbrs.update(int(u) for u in g.neighbors(v))
    rec = np.array(deleted + sorted(nbrs - dset), dtype=np.int64)
    local = {int(v): i for i, v in enumerate(rec)}
    e = g.edges
    if induced:
        sel = np.isin(e[:, 0], rec) & np.isin(e[:, 1], rec)
    else:
        d = np.asarray(deleted)
        sel = np.isin(e[:, 0], d) | np.isin(e[:, 1], d)
    pairs = [(local[int(a)], local[int(b)]) for a, b in e[sel]]
    rec_edges = canonical_edges(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
    return RecoveryTarget(rec_nodes=rec, n_deleted=len(deleted), rec_edges=rec_edges,
                          rec_X=g.X[rec].copy(), rec_y=g.y[rec].copy())


def node_homophily(g: Graph) -> float:
    """Mean over nodes of the fraction of neighbours sharing the node's label."""
    deg = g.degrees()
    if g.n == 0 or np.any(deg == 0):
        raise ValueError("node homophily is undefined with isolated nodes")
    u, v = g.edges[:, 0], g.edges[:, 1]
    same = (g.y[u] == g.y[v]).astype(np.float64)
    hits = np.zeros(g.n)
    np.add.at(hits, u, same)
    np.add.at(hits, v, same)
    return float(np.mean(hits / deg))


def star_edges(n_deleted: int, neighbour_sets: Sequence[Sequence[int]]) -> np.ndarray:
    """Local star edges: deleted node ``i`` joined to each local neighbour index in ``neighbour_sets[i]``."""
    pairs = [(i, j) for i in range(n_deleted) for j in neighbour_sets[i]]
    return canonical_edges(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)


def edge_adjacency(n: int, edges) -> sp.csr_matrix:
    """Symmetric 0/1 CSR adjacency from a local ``(m, 2)`` edge array."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return (a + a.T).tocsr()
