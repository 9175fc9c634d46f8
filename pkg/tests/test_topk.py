import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cssample import tensor as T
from cssample.pointcloud import PointCloud
from cssample.tensor import Graph
from cssample.topk import (
    TopkConfig,
    build_cost,
    hard_topk,
    sinkhorn,
    soft_indicator,
    straight_through_select,
)

from reference import min_max_cost, sinkhorn_on_graph, sinkhorn_plain


def fixed(epsilon, iters, **kw):
    """Config that always runs exactly ``iters`` iterations."""
    return TopkConfig(epsilon=epsilon, max_iters=iters, tol=1e-300, **kw)


def omega_of(scores, k, cfg=TopkConfig()):
    with Graph(np.float64) as g:
        plan = sinkhorn(build_cost(g.constant(scores)), k, cfg)
        return soft_indicator(plan).data.copy(), plan


def gapped_scores(rng, n, gap=1e-3):
    """Random scores whose sorted neighbours differ by at least ``gap``."""
    steps = gap + rng.exponential(0.05, size=n)
    return rng.permutation(np.cumsum(steps))


# --- config -----------------------------------------------------------------


@pytest.mark.parametrize(
    "kw", [dict(epsilon=0.0), dict(max_iters=0), dict(tol=0.0), dict(support_size=3), dict(eps_decay=0.0)]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TopkConfig(**kw)


def test_config_defaults():
    cfg = TopkConfig()
    assert (cfg.epsilon, cfg.max_iters, cfg.tol, cfg.support_size) == (0.01, 200, 1e-6, 2)
    assert cfg.schedule(0) == 1.0 and cfg.schedule(10_000) == cfg.epsilon


# --- cost -------------------------------------------------------------------


def test_build_cost_examples():
    with Graph(np.float64) as g:
        assert np.array_equal(build_cost(g.constant([2.0, 2.0, 2.0])).data, np.full((3, 2), 0.25))
        c = build_cost(g.constant([5.0, -1.0, 2.0])).data
    assert np.array_equal(c[0], [0.0, 1.0]) and np.array_equal(c[1], [1.0, 0.0])
    assert np.allclose(c, min_max_cost([5.0, -1.0, 2.0]), atol=0)


def test_build_cost_monotone_and_errors():
    rng = np.random.default_rng(0)
    s = rng.normal(size=30)
    with Graph(np.float64) as g:
        c = build_cost(g.constant(s)).data
        with pytest.raises(ValueError):
            build_cost(g.constant([1.0]))
        with pytest.raises(ValueError):
            build_cost(g.constant([1.0, np.nan]))
    order = np.argsort(s)
    assert np.all(np.diff(c[order, 0]) < 0)


def test_build_cost_gradient():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(9, 2))
    for _ in range(20):
        rep = T.finite_diff_check(lambda x: T.reduce_sum(T.mul(build_cost(x), x.graph.constant(w))), rng.normal(size=9))
        assert rep.max_rel_error < 1e-4


# --- sinkhorn forward ---------------------------------------------------------


@pytest.mark.parametrize("n,k,eps", [(16, 8, 0.5), (40, 10, 0.05), (128, 16, 0.01), (7, 1, 1.0)])
def test_sinkhorn_matches_plain_reference(n, k, eps):
    rng = np.random.default_rng(n)
    C = min_max_cost(rng.normal(size=n))
    with Graph(np.float64) as g:
        plan = sinkhorn(g.constant(C), k, fixed(eps, 150))
    assert plan.iterations_used == 150 and not plan.converged
    assert np.abs(plan.gamma.data - sinkhorn_plain(C, k, eps, 150)).max() < 1e-13


def test_sinkhorn_annealing_reference_with_other_schedule():
    rng = np.random.default_rng(5)
    C = min_max_cost(rng.normal(size=33))
    cfg = fixed(0.02, 90, eps_start=0.3, eps_decay=0.9)
    with Graph(np.float64) as g:
        got = sinkhorn(g.constant(C), 11, cfg).gamma.data
    assert np.abs(got - sinkhorn_plain(C, 11, 0.02, 90, 0.3, 0.9)).max() < 1e-13


def test_converged_plan_marginals():
    rng = np.random.default_rng(2)
    hits = 0
    for _ in range(40):
        n = int(rng.integers(16, 200))
        k = n // int(rng.choice([2, 4, 8]))
        _, plan = omega_of(rng.normal(size=n), k)
        if plan.converged:
            hits += 1
            assert plan.row_violation <= 1e-6 and plan.col_violation <= 1e-6
        assert np.all(plan.gamma.data >= 0)
        assert np.allclose(plan.mu, 1 / n) and np.allclose(plan.nu, [k / n, (n - k) / n])
    assert hits >= 30


def test_large_epsilon_gives_product_measure():
    rng = np.random.default_rng(3)
    n, k = 20, 5
    _, plan = omega_of(rng.normal(size=n), k, TopkConfig(epsilon=1e6))
    assert np.abs(plan.gamma.data - np.outer(plan.mu, plan.nu)).max() < 1e-4


def test_nonconvergence_is_reported_not_raised():
    _, plan = omega_of(np.random.default_rng(4).normal(size=50), 10, TopkConfig(epsilon=1e-3, max_iters=3))
    assert not plan.converged and plan.iterations_used == 3
    assert plan.row_violation > 1e-6


def test_sinkhorn_input_errors():
    with Graph(np.float64) as g:
        with pytest.raises(ValueError):
            sinkhorn(g.constant(np.full((4, 2), np.inf)), 2)
        with pytest.raises(ValueError):
            sinkhorn(g.constant(np.zeros((4, 2))), 4)
        with pytest.raises(ValueError):
            sinkhorn(g.constant(np.zeros((4, 3))), 2)


# --- sinkhorn backward --------------------------------------------------------


@pytest.mark.parametrize("n,k,eps,iters", [(12, 3, 0.1, 60), (30, 15, 0.05, 120), (9, 1, 0.3, 40)])
def test_fused_backward_matches_graph_autodiff(n, k, eps, iters):
    """Fused hand-written backward vs op-by-op autodiff of the same recursion."""
    rng = np.random.default_rng(n + k)
    C = min_max_cost(rng.normal(size=n))
    W = rng.normal(size=(n, 2))
    grads = []
    for route in ("fused", "graph"):
        with Graph(np.float64) as g:
            c = g.param(C)
            if route == "fused":
                gamma = sinkhorn(c, k, fixed(eps, iters)).gamma
            else:
                gamma = sinkhorn_on_graph(T, c, k, eps, iters)
            grads.append(T.backward(g, T.reduce_sum(T.mul(gamma, g.constant(W))))[c])
    assert np.abs(grads[0] - grads[1]).max() <= 1e-10 * np.abs(grads[1]).max()


def test_plan_gradient_matches_finite_differences_at_eps_0_1():
    rng = np.random.default_rng(6)
    cfg = fixed(0.1, 200)
    for _ in range(5):
        n = int(rng.integers(6, 20))
        k = int(rng.integers(1, n))
        W = rng.normal(size=(n, 2))
        C = min_max_cost(rng.normal(size=n))
        rep = T.finite_diff_check(
            lambda c: T.reduce_sum(T.mul(sinkhorn(c, k, cfg).gamma, c.graph.constant(W))), C, h=1e-5, tol=1e-4
        )
        assert rep.passed, rep


# --- soft indicator -----------------------------------------------------------


def test_soft_indicator_sums_to_k_and_is_bounded():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(8, 120))
        k = int(rng.integers(1, n))
        om, plan = omega_of(rng.normal(size=n), k)
        assert np.all(om >= 0)
        if plan.converged:
            # rows are within tol of 1/n, so n * gamma_i0 <= 1 + n * tol
            assert abs(om.sum() - k) <= n * 1e-6
            assert np.all(om <= 1 + n * 1e-6)


def test_small_epsilon_orders_like_scores():
    rng = np.random.default_rng(8)
    for _ in range(10):
        s = gapped_scores(rng, 64)
        om, _ = omega_of(s, 16, TopkConfig(epsilon=1e-4))
        assert set(np.argsort(-om)[:16]) == set(np.argsort(-s)[:16])


def test_equal_scores_get_equal_omega():
    rng = np.random.default_rng(9)
    s = rng.normal(size=20)
    s[7] = s[3]
    om, _ = omega_of(s, 5)
    assert abs(om[7] - om[3]) < 1e-8


def test_soft_indicator_permutation_equivariant():
    rng = np.random.default_rng(10)
    for _ in range(10):
        s = rng.normal(size=40)
        perm = rng.permutation(40)
        a, _ = omega_of(s, 10)
        b, _ = omega_of(s[perm], 10)
        assert np.allclose(b, a[perm], rtol=0, atol=1e-12)


def test_raising_a_score_does_not_lower_its_omega():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n = int(rng.integers(8, 64))
        k = int(rng.integers(1, n))
        s = rng.normal(size=n)
        i = int(rng.integers(n))
        cfg = fixed(0.05, 300)
        before, _ = omega_of(s, k, cfg)
        s2 = s.copy()
        s2[i] += abs(rng.normal()) * 0.3
        after, _ = omega_of(s2, k, cfg)
        assert after[i] >= before[i] - 1e-9


# --- hard top-k ---------------------------------------------------------------


def test_hard_topk_examples():
    assert hard_topk([0.9, 0.1, 0.8, 0.2], 2).tolist() == [0, 2]
    assert hard_topk([1.0] * 5, 3).tolist() == [0, 1, 2]
    with pytest.raises(ValueError):
        hard_topk([1.0, 2.0], 3)


def test_hard_topk_against_sort_oracle():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        k = int(rng.integers(1, n + 1))
        s = rng.integers(0, 6, size=n).astype(float) if rng.random() < 0.3 else rng.normal(size=n)
        oracle = sorted(range(n), key=lambda i: (-s[i], i))[:k]
        assert hard_topk(s, k).tolist() == oracle


# --- straight-through selection ---------------------------------------------


def test_straight_through_forward():
    rng = np.random.default_rng(13)
    cloud = PointCloud(rng.normal(size=(30, 3)))
    s = rng.normal(size=30)
    with Graph(np.float64) as g:
        res, gates, _ = straight_through_select(cloud, g.param(s), 8)
    assert np.array_equal(res.indices, hard_topk(s, 8))
    assert np.array_equal(res.sampled.points, cloud.points[res.indices])
    assert np.array_equal(gates.data, np.ones(8))


def test_straight_through_gradient_sign():
    """Loss sum_j g_j c_j with c_j > 0: raising a selected score raises omega, so
    the score gradient is negative; cross-checked by differencing omega."""
    rng = np.random.default_rng(14)
    cfg = fixed(0.1, 200)
    for _ in range(10):
        n, k = 24, 6
        cloud = PointCloud(rng.normal(size=(n, 3)))
        s = rng.normal(size=n)
        c = rng.uniform(0.5, 2.0, size=k)
        with Graph(np.float64) as g:
            x = g.param(s)
            res, gates, _ = straight_through_select(cloud, x, k, cfg)
            grad = T.backward(g, T.reduce_sum(T.mul(gates, g.constant(c))))[x]
        j = int(res.indices[0])
        h = 1e-6
        up, down = s.copy(), s.copy()
        up[j] += h
        down[j] -= h
        fd = (omega_of(up, k, cfg)[0][res.indices] @ c - omega_of(down, k, cfg)[0][res.indices] @ c) / (2 * h)
        assert grad[j] < 0 and fd < 0
        assert abs(grad[j] - fd) <= 1e-5 * abs(fd)


def test_straight_through_rejects_bad_k():
    cloud = PointCloud(np.zeros((5, 3)))
    with Graph(np.float64) as g:
        with pytest.raises(ValueError):
            straight_through_select(cloud, g.param(np.arange(5.0)), 5)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40), st.data())
def test_no_duplicates_even_with_coincident_points(n, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    k = data.draw(st.integers(1, n - 1))
    pts = rng.normal(size=(n, 3))
    dup = rng.integers(0, n, size=n // 2)
    pts[rng.integers(0, n, size=n // 2)] = pts[dup]
    s = rng.integers(0, 3, size=n).astype(float)
    cloud = PointCloud(pts)
    with Graph(np.float32) as g:
        res, _, _ = straight_through_select(cloud, g.param(s), k)
    assert np.unique(res.indices).size == k
    assert np.array_equal(res.sampled.points, cloud.points[res.indices])
