import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnprobe.graph import (DeletionRequest, GraphParseError, canonical_edges, load_graph, n_targets,
                                node_homophily, ranked_by_degree, recovery_target, save_graph, select_groups,
                                select_targets, split, synth_graph)
from unlearnprobe.validation import GraphValidationError, check_graph


def _write(tmp_path, nodes, edges):
    (tmp_path / "n.csv").write_text(nodes)
    (tmp_path / "e.csv").write_text(edges)
    return tmp_path / "n.csv", tmp_path / "e.csv"


def test_round_trip(tmp_path, synth):
    save_graph(synth, tmp_path / "n.csv", tmp_path / "e.csv")
    g = load_graph(tmp_path / "n.csv", tmp_path / "e.csv")
    np.testing.assert_array_equal(g.X, synth.X)
    np.testing.assert_array_equal(g.y, synth.y)
    np.testing.assert_array_equal(g.edges, synth.edges)


def test_edge_order_is_canonicalised(tmp_path):
    n, e = _write(tmp_path, "id,label,f0\n0,0,1\n1,1,2\n2,0,3\n", "src,dst\n2,1\n1,0\n")
    np.testing.assert_array_equal(load_graph(n, e).edges, [[0, 1], [1, 2]])


@pytest.mark.parametrize("edges, message", [
    ("src,dst\n0,7\n", "dangling"),
    ("src,dst\n1,1\n", "self-loop"),
    ("src,dst\n0,1\n1,0\n", "duplicate"),
    ("src,dst\n0,x\n", "malformed"),
])
def test_bad_edges_report_line(tmp_path, edges, message):
    n, e = _write(tmp_path, "id,label,f0\n0,0,1\n1,1,2\n", edges)
    with pytest.raises(GraphParseError, match=message) as info:
        load_graph(n, e)
    assert ":2" in str(info.value) or ":3" in str(info.value)


def test_non_numeric_feature(tmp_path):
    n, e = _write(tmp_path, "id,label,f0\n0,0,abc\n1,1,2\n", "src,dst\n0,1\n")
    with pytest.raises(GraphParseError, match=":2"):
        load_graph(n, e)


def test_isolated_node_rejected(tmp_path):
    n, e = _write(tmp_path, "id,label,f0\n0,0,1\n1,1,2\n2,0,3\n", "src,dst\n0,1\n")
    with pytest.raises(GraphValidationError, match="isolated"):
        load_graph(n, e)


def test_synth_is_seeded_and_valid():
    a = synth_graph(60, 3, 8, 0.2, 0.02, seed=5)
    b = synth_graph(60, 3, 8, 0.2, 0.02, seed=5)
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.X, b.X)
    check_graph(a)
    assert np.bincount(a.y).tolist() == [20, 20, 20]


def test_benchmark_graph_statistics(synth):
    assert synth.n == 200
    assert 0.7 <= node_homophily(synth) <= 0.9
    assert synth.train_mask.sum() == 100


def test_homophily_oracle(synth):
    brute = []
    for v in range(synth.n):
        nb = synth.neighbors(v)
        brute.append(np.mean(synth.y[nb] == synth.y[v]))
    assert node_homophily(synth) == pytest.approx(np.mean(brute), abs=1e-12)


def test_split_rejects_small_classes(synth):
    with pytest.raises(ValueError, match="class"):
        split(synth, 40, 20)
    with pytest.raises(ValueError, match="empty"):
        split(synth, 0, 0)


def test_split_masks_disjoint(synth):
    total = synth.train_mask.astype(int) + synth.val_mask + synth.test_mask
    assert (total == 1).all()


def test_target_count_rounding():
    assert n_targets(140, 0.1) == 14
    assert n_targets(100, 0.1) == 10


def test_worst_policy_takes_highest_degree(synth):
    reqs = select_targets(synth, 0.1, "worst")
    nodes = [r.deleted_nodes[0] for r in reqs]
    deg = synth.degrees()
    train = np.flatnonzero(synth.train_mask)
    assert min(deg[nodes]) >= max(np.delete(deg[train], np.searchsorted(train, nodes)), default=0)


def test_random_policy_seeded(synth):
    assert select_targets(synth, 0.1, seed=1) == select_targets(synth, 0.1, seed=1)


def test_degree_ties_by_id(synth):
    ranked = ranked_by_degree(synth, np.flatnonzero(synth.train_mask))
    deg = synth.degrees()[ranked]
    assert (np.diff(deg) <= 0).all()
    same = deg[:-1] == deg[1:]
    assert (ranked[:-1][same] < ranked[1:][same]).all()


def test_groups_are_disjoint(synth):
    groups = select_groups(synth, 5, 5, "worst")
    flat = [v for g in groups for v in g.deleted_nodes]
    assert len(flat) == len(set(flat)) == 25


def test_request_invariants(synth):
    with pytest.raises(ValueError):
        DeletionRequest((), "random")
    test_node = int(np.flatnonzero(synth.test_mask)[0])
    with pytest.raises(ValueError, match="training"):
        recovery_target(synth, DeletionRequest((test_node,), "random"))


def test_recovery_target_of_single_node_is_a_star(synth):
    v = int(np.flatnonzero(synth.train_mask)[0])
    t = recovery_target(synth, DeletionRequest((v,), "random"))
    assert t.rec_nodes[0] == v
    assert sorted(t.rec_nodes[1:]) == sorted(synth.neighbors(v).tolist())
    assert t.n_edges == synth.degrees()[v]
    assert (t.rec_edges[:, 0] == 0).all()


def test_recovery_target_multi_counts_edges_touching_deleted(synth):
    req = select_groups(synth, 5, 1, "random", seed=2)[0]
    t = recovery_target(synth, req)
    d = set(req.deleted_nodes)
    expected = sum(1 for u, v in synth.edges if u in d or v in d)
    assert t.n_edges == expected


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)).filter(lambda p: p[0] != p[1]),
                unique_by=lambda p: (min(p), max(p)), max_size=20))
def test_canonical_edges_sorted_and_ordered(pairs):
    e = canonical_edges(pairs)
    assert (e[:, 0] < e[:, 1]).all() if len(e) else True
    assert [tuple(r) for r in e] == sorted({(min(a, b), max(a, b)) for a, b in pairs})
