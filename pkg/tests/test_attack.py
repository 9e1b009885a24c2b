import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unlearnprobe import autodiff as ad
from unlearnprobe.attack import (AttackDivergedError, AttackInputs, RegionReconstructor, baseline_fewe,
                                 baseline_rand, curvature_loss, dummy_grad_diff, edge_probability,
                                 empirical_fisher_diag, finalize_edges, grad_match_loss, init_dummy,
                                 planted_inputs, project, smooth_loss)
from unlearnprobe.autodiff import Tensor
from unlearnprobe.gnn import GradientVector, ModelState, Propagator, forward, init_params
from unlearnprobe.graph import edge_adjacency, select_groups, select_targets
from unlearnprobe.unlearn import UnlearnCounts, retrain_unlearn


@pytest.fixture(scope="module")
def small_unlearn(small, small_models):
    req = select_targets(small, 0.1, "worst")[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return retrain_unlearn(small, req, small_models["GCN"].state_, hidden=16, epochs=60, seed=1)


@pytest.fixture(scope="module")
def small_multi(small, small_models):
    req = select_groups(small, 3, 1, "worst")[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return retrain_unlearn(small, req, small_models["GCN"].state_, hidden=16, epochs=60, seed=1)


# -- initialisation ---------------------------------------------------------------
def test_edge_probability_example():
    assert edge_probability(5, 4) == pytest.approx(0.4)


def test_single_mode_star():
    d = init_dummy(UnlearnCounts(1, 4, 3, (0, 1, 1, 0)), 5)
    np.testing.assert_array_equal(d.edges, [[0, 1], [0, 2], [0, 3]])
    assert d.X.shape == (4, 5) and d.mode == "single"


def test_single_mode_checks_counts():
    with pytest.raises(ValueError, match="star"):
        init_dummy(UnlearnCounts(1, 4, 5, (0,) * 4), 5)
    with pytest.raises(ValueError):
        init_dummy(UnlearnCounts(2, 4, 3, (0,) * 4), 5, mode="single")


def test_init_is_seeded():
    c = UnlearnCounts(2, 6, 5, (0,) * 6)
    a, b = init_dummy(c, 3, "multi", seed=9), init_dummy(c, 3, "multi", seed=9)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.adj, b.adj)
    assert np.allclose(a.adj, a.adj.T) and not np.diag(a.adj).any()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(-2, 3)))
def test_projection_is_idempotent_and_valid(a):
    p = project(a)
    np.testing.assert_allclose(project(p), p)
    assert p.min() >= 0 and p.max() <= 1 and np.allclose(p, p.T) and not np.diag(p).any()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.integers(0, 15), st.integers(0, 1000))
def test_finalize_meets_budget_exactly(a, budget, seed):
    e = finalize_edges(project(a), budget, seed)
    assert len(e) == budget
    assert (e[:, 0] < e[:, 1]).all()
    assert len({tuple(r) for r in e}) == budget


def test_finalize_rejects_impossible_budget():
    with pytest.raises(ValueError):
        finalize_edges(np.zeros((3, 3)), 4)


# -- loss pieces ------------------------------------------------------------------
def test_grad_match_examples():
    a = np.array([0.3, -1.2, 2.0])
    assert grad_match_loss(a, a).item() == 0.0
    assert grad_match_loss(np.array([-1.0, 0.0]), np.array([1.0, 0.0])).item() == pytest.approx(4.0)
    assert grad_match_loss(np.zeros(2), np.array([1.0, 0.0])).item() == pytest.approx(1.5)


def test_grad_match_second_implementation():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.standard_normal(50), rng.standard_normal(50)
        ref = 1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) + np.mean((a - b) ** 2)
        assert grad_match_loss(a, b).item() == pytest.approx(ref, abs=1e-12)


def test_grad_match_rejects_mismatch():
    with pytest.raises(ValueError, match="length"):
        grad_match_loss(np.ones(3), np.ones(4))


def test_curvature_examples():
    assert curvature_loss(np.array([1.0, 1.0]), np.zeros(2), np.array([1.0, 4.0])).item() == 1.25
    assert curvature_loss(np.ones(2), np.ones(2), np.ones(2)).item() == 0.0
    rng = np.random.default_rng(2)
    a, b, f = rng.standard_normal(7), rng.standard_normal(7), rng.uniform(0.1, 2, 7)
    assert curvature_loss(a, b, f).item() == pytest.approx((a - b) @ np.diag(1 / f) @ (a - b), rel=1e-12)
    with pytest.raises(ValueError):
        curvature_loss(a, b, np.zeros(7))


def test_smooth_examples():
    assert smooth_loss(np.ones((3, 2)), np.array([[0, 1], [1, 2]])).item() == 0.0
    assert smooth_loss(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0, 1]])).item() == pytest.approx(1.0)


def test_smooth_two_formulas_agree():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((12, 4))
    iu = np.triu_indices(12, 1)
    keep = rng.random(len(iu[0])) < 0.3
    edges = np.stack([iu[0][keep], iu[1][keep]], 1)
    edge_sum = sum(np.sum((X[i] - X[j]) ** 2) for i, j in edges)
    assert smooth_loss(X, edges).item() == pytest.approx(edge_sum, abs=1e-10)
    dense = edge_adjacency(12, edges).toarray()
    assert smooth_loss(X, dense).item() == pytest.approx(edge_sum, abs=1e-10)


def _toy_state():
    return ModelState("GCN", 2, 3, 2, init_params("GCN", 2, 3, 2, seed=5), 5)


def _fd_jacobian(state, X, adj, y, i, eps=1e-6):
    flat = state.flat()

    def logp(vec):
        s = state.with_flat(vec)
        with ad.no_grad():
            logits, _ = forward("GCN", s.tensors(), Tensor(X), Propagator(adj, "GCN"))
            return ad.log_softmax(logits).data[i, y[i]]

    g = np.zeros_like(flat)
    for k in range(len(flat)):
        e = np.zeros_like(flat)
        e[k] = eps
        g[k] = (logp(flat + e) - logp(flat - e)) / (2 * eps)
    return g


def test_fisher_matches_dense_outer_products():
    state = _toy_state()
    rng = np.random.default_rng(4)
    X = rng.standard_normal((3, 2))
    adj = edge_adjacency(3, [(0, 1), (0, 2)])
    y = np.array([0, 1, 1])
    F = sum(np.outer(g, g) for g in (_fd_jacobian(state, X, adj, y, i) for i in range(3))) / 3
    got = empirical_fisher_diag(state, X, adj, y, damping=1e-4)
    np.testing.assert_allclose(got, np.diag(F) + 1e-4, rtol=1e-6, atol=1e-9)


def test_fisher_of_zero_gradients_is_damping():
    state = ModelState("SGC", 2, 0, 2, {"W": np.zeros((2, 2))}, 0)
    got = empirical_fisher_diag(state, np.zeros((2, 2)), edge_adjacency(2, [(0, 1)]), [0, 1], damping=1e-3)
    np.testing.assert_allclose(got, 1e-3)


def test_fisher_single_parameter_case():
    # one node, one feature, logits (w*x, 0): d log p(y=0)/dw = x * (1 - sigmoid(w*x))
    W = np.array([[0.7, 0.0]])
    state = ModelState("SGC", 1, 0, 2, {"W": W}, 0)
    x = 1.3
    got = empirical_fisher_diag(state, np.array([[x]]), edge_adjacency(1, np.zeros((0, 2))), [0], damping=0.01)
    g = x * (1 - 1 / (1 + np.exp(-0.7 * x)))
    assert got[0] == pytest.approx(g * g + 0.01, rel=1e-10)
    assert got[1] == pytest.approx(g * g + 0.01, rel=1e-10)


def test_matching_loss_is_differentiable_in_features(small_unlearn):
    res = small_unlearn
    state = res.original
    dummy = init_dummy(res.counts, state.n_features, seed=1)
    prop = Propagator(edge_adjacency(dummy.n, dummy.edges), "GCN")
    d_obs = res.grad_diff.flat

    def f(X):
        d = dummy_grad_diff(state, state.tensors(requires_grad=True), X, prop, dummy.y, res.grad_unlearned)
        return grad_match_loss(d, d_obs)

    assert ad.finite_diff_check(f, dummy.X, eps=1e-6) < 1e-3


def test_matching_loss_is_differentiable_in_relaxed_adjacency(small_multi):
    res = small_multi
    state = res.original
    dummy = init_dummy(res.counts, state.n_features, "multi", seed=2)
    A0 = project(0.5 * dummy.adj + 0.25)
    d_obs = res.grad_diff.flat

    def f(A):
        sym = ad.mul(ad.add(A, ad.transpose(A)), 0.5)
        d = dummy_grad_diff(state, state.tensors(requires_grad=True), Tensor(dummy.X),
                            Propagator(sym, "GCN"), dummy.y, res.grad_unlearned)
        return grad_match_loss(d, d_obs)

    assert ad.finite_diff_check(f, A0, eps=1e-6) < 1e-3


# -- the optimiser ----------------------------------------------------------------
def test_zero_coefficients_reduce_to_matching(small_unlearn):
    res = small_unlearn
    inputs = AttackInputs.from_unlearn(res)
    est = RegionReconstructor(alpha1=0.0, alpha2=0.0)
    dummy = init_dummy(res.counts, res.original.n_features, seed=0)
    total, parts = est.objective(inputs, dummy)(Tensor(dummy.X), None, None)
    assert total.item() == parts["grad"].item()
    state = res.original
    d = dummy_grad_diff(state, state.tensors(requires_grad=True), Tensor(dummy.X),
                        Propagator(edge_adjacency(dummy.n, dummy.edges), "GCN"), dummy.y, res.grad_unlearned)
    assert total.item() == grad_match_loss(d, inputs.grad_diff.flat).item()


def test_loss_is_non_negative(small_unlearn, small_multi):
    for res in (small_unlearn, small_multi):
        r = RegionReconstructor(max_iters=5).fit(AttackInputs.from_unlearn(res)).result_
        assert min(r.loss_trace) >= 0


def test_planted_truth_is_a_fixed_point(small_unlearn):
    inputs, truth = planted_inputs(small_unlearn)
    est = RegionReconstructor(alpha2=0.0, weight_decay=0.0, max_iters=200)
    trace = est.fit(inputs, init=truth).result_.loss_trace
    rand = baseline_rand(inputs, seed=0).loss_trace[0]
    assert trace[0] < 1e-3 * rand
    assert max(np.diff(trace)) <= 1e-6


def test_zero_features_score_worse_than_truth(small_unlearn):
    inputs, truth = planted_inputs(small_unlearn)
    obj = RegionReconstructor(alpha2=0.0).objective(inputs, truth)
    fisher = obj.fisher(truth.X, None)
    at_truth = obj(Tensor(truth.X), None, fisher)[0].item()
    at_zero = obj(Tensor(np.zeros_like(truth.X)), None, fisher)[0].item()
    assert at_zero > at_truth


def test_rand_baseline(small_unlearn):
    inputs = AttackInputs.from_unlearn(small_unlearn)
    a, b = baseline_rand(inputs, seed=3), baseline_rand(inputs, seed=3)
    assert a.iterations == 0 and len(a.loss_trace) == 1
    np.testing.assert_array_equal(a.X, b.X)


def test_fewe_budget_and_prefix(small_unlearn):
    assert RegionReconstructor(iter_fraction=0.01).n_iters == 100
    inputs = AttackInputs.from_unlearn(small_unlearn)
    few = baseline_fewe(inputs, seed=1, max_iters=400)
    full = RegionReconstructor(max_iters=400, seed=1).fit(inputs).result_
    assert few.iterations == 4
    assert few.loss_trace == full.loss_trace[:4]
    assert few.loss_trace[-1] >= min(full.loss_trace)


def test_multi_mode_meets_edge_budget(small_multi):
    res = RegionReconstructor(max_iters=20, seed=0).fit(AttackInputs.from_unlearn(small_multi)).result_
    assert res.mode == "multi"
    assert len(res.edges) == small_multi.counts.n_edges
    assert res.adj_prob.min() >= 0 and res.adj_prob.max() <= 1


def test_non_finite_release_is_rejected(small_unlearn):
    res = small_unlearn
    bad = GradientVector(res.grad_original.layout, np.full(res.grad_original.flat.shape, np.nan))
    with pytest.raises(FloatingPointError):
        RegionReconstructor(max_iters=10).fit(AttackInputs(res.original, bad, res.grad_unlearned, res.counts))


def test_divergence_keeps_the_trace(small_unlearn, monkeypatch):
    from unlearnprobe import attack
    inputs = AttackInputs.from_unlearn(small_unlearn)
    calls = []
    real = attack._Objective.__call__

    def flaky(self, X, A, fisher):
        total, parts = real(self, X, A, fisher)
        calls.append(1)
        return (Tensor(np.array(np.nan), _check=False) if len(calls) == 3 else total), parts

    monkeypatch.setattr(attack._Objective, "__call__", flaky)
    with pytest.raises(AttackDivergedError, match="iteration 2") as info:
        RegionReconstructor(max_iters=10).fit(inputs)
    assert len(info.value.trace) == 2


def test_invalid_config(small_unlearn):
    inputs = AttackInputs.from_unlearn(small_unlearn)
    for bad in ({"alpha1": -1}, {"lr": 0}, {"decay_factor": 1.5}, {"mode": "both"}, {"iter_fraction": 2}):
        with pytest.raises(ValueError):
            RegionReconstructor(**bad).fit(inputs)


def test_result_persistence(tmp_path, small_unlearn):
    res = RegionReconstructor(max_iters=3).fit(AttackInputs.from_unlearn(small_unlearn)).result_
    res.save(tmp_path)
    rows = np.loadtxt(tmp_path / "features.csv", delimiter=",", skiprows=1, ndmin=2)
    np.testing.assert_array_equal(rows[:, 2:], res.X)
    trace = np.loadtxt(tmp_path / "loss_trace.csv", delimiter=",", skiprows=1, ndmin=2)
    assert trace[:, 1].tolist() == res.loss_trace
    assert math.isfinite(res.loss_trace[-1])
