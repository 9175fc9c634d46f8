"""Differentiable Top-k through entropic optimal transport.

Scores are transported onto the two-point support {1, 0}: mass 1/n leaves
every point, k/n arrives at the "selected" anchor and (n-k)/n at the other.
The entropic plan is found with log-domain Sinkhorn; n times its first column
is a smooth top-k indicator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import tensor as T
from .pointcloud import PointCloud
from .samplers import SampleResult, check_k
from .tensor import Tensor

__all__ = [
    "TopkConfig",
    "TransportPlan",
    "build_cost",
    "sinkhorn",
    "soft_indicator",
    "hard_topk",
    "straight_through_gate",
    "straight_through_select",
    "topk_marginals",
]


@dataclass(frozen=True)
class TopkConfig:
    epsilon: float = 0.01
    max_iters: int = 200
    tol: float = 1e-6
    support_size: int = 2
    # epsilon-scaling: iteration t runs at max(epsilon, eps_start * eps_decay**t)
    eps_start: float = 1.0
    eps_decay: float = 0.95

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.support_size != 2:
            raise ValueError("only the two-anchor support is supported")
        if not 0 < self.eps_decay <= 1:
            raise ValueError("eps_decay must be in (0, 1]")

    def schedule(self, t: int) -> float:
        return max(self.epsilon, self.eps_start * self.eps_decay**t)


@dataclass
class TransportPlan:
    gamma: Tensor
    mu: np.ndarray
    nu: np.ndarray
    iterations_used: int
    converged: bool

    @property
    def row_violation(self) -> float:
        return float(np.abs(self.gamma.data.astype(np.float64).sum(axis=1) - self.mu).max())

    @property
    def col_violation(self) -> float:
        return float(np.abs(self.gamma.data.astype(np.float64).sum(axis=0) - self.nu).max())


def topk_marginals(n: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    return np.full(n, 1.0 / n), np.array([k / n, (n - k) / n])


def build_cost(scores: Tensor) -> Tensor:
    """Squared distance of min-max normalised scores to the anchors 1 and 0."""
    if scores.ndim != 1 or scores.shape[0] < 2:
        raise ValueError(f"need a score vector of length >= 2, got shape {scores.shape}")
    s = scores.data.astype(np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    i_min, i_max = int(np.argmin(s)), int(np.argmax(s))
    span = s[i_max] - s[i_min]
    if span > 0:
        sh = (s - s[i_min]) / span
    else:
        sh = np.full_like(s, 0.5)
    cost = np.stack([(sh - 1.0) ** 2, sh**2], axis=1)

    def bw(g):
        if span <= 0:
            return (np.zeros_like(s),)
        g = g.astype(np.float64)
        dsh = 2.0 * (sh - 1.0) * g[:, 0] + 2.0 * sh * g[:, 1]
        ds = dsh / span
        ds[i_min] += np.dot(dsh, sh - 1.0) / span
        ds[i_max] -= np.dot(dsh, sh) / span
        return (ds,)

    return T._make(scores.graph, cost, (scores,), bw)


@njit(cache=True)
def _sinkhorn_forward(C, k, eps_target, eps_start, eps_decay, max_iters, tol):
    n = C.shape[0]
    log_mu = np.log(1.0 / n)
    log_nu0 = np.log(k / n)
    log_nu1 = np.log((n - k) / n)
    # per iteration: share of column 0 in the row update, and the column
    # update softmax weights over rows; grown on demand since most solves
    # stop far below max_iters
    cap = min(max_iters, 256)
    row_w = np.empty((cap, n))
    col_w = np.empty((cap, n, 2))
    f = np.zeros(n)
    lse = np.empty(n)
    x0 = np.empty(n)
    g0 = 0.0
    g1 = 0.0
    it = 0
    last_eps = -1.0
    converged = False
    while True:
        eps = max(eps_target, eps_start * eps_decay**it)
        # row log-sum-exp at the current column potentials; it serves both
        # the stopping test and the next row update
        for i in range(n):
            a = (g0 - C[i, 0]) / eps
            b = (g1 - C[i, 1]) / eps
            x0[i] = a
            lse[i] = max(a, b) + np.log1p(np.exp(-abs(a - b)))
        if last_eps == eps_target:
            # row sums of the current plan are exp(f/eps + lse)
            worst = 0.0
            for i in range(n):
                worst = max(worst, abs(np.exp(f[i] / eps + lse[i]) - 1.0 / n))
            if worst <= tol:
                converged = True
                break
        if it == max_iters:
            break
        if it == cap:
            cap = min(max_iters, 2 * cap)
            grown_r = np.empty((cap, n))
            grown_c = np.empty((cap, n, 2))
            grown_r[:it] = row_w
            grown_c[:it] = col_w
            row_w = grown_r
            col_w = grown_c
        for i in range(n):
            row_w[it, i] = np.exp(x0[i] - lse[i])
            f[i] = eps * (log_mu - lse[i])
        m0 = -np.inf
        m1 = -np.inf
        for i in range(n):
            m0 = max(m0, (f[i] - C[i, 0]) / eps)
            m1 = max(m1, (f[i] - C[i, 1]) / eps)
        s0 = 0.0
        s1 = 0.0
        for i in range(n):
            e0 = np.exp((f[i] - C[i, 0]) / eps - m0)
            e1 = np.exp((f[i] - C[i, 1]) / eps - m1)
            col_w[it, i, 0] = e0
            col_w[it, i, 1] = e1
            s0 += e0
            s1 += e1
        for i in range(n):
            col_w[it, i, 0] /= s0
            col_w[it, i, 1] /= s1
        g0 = eps * (log_nu0 - m0 - np.log(s0))
        g1 = eps * (log_nu1 - m1 - np.log(s1))
        last_eps = eps
        it += 1
    plan = np.empty((n, 2))
    for i in range(n):
        plan[i, 0] = np.exp((f[i] + g0 - C[i, 0]) / last_eps)
        plan[i, 1] = np.exp((f[i] + g1 - C[i, 1]) / last_eps)
    return plan, row_w[:it].copy(), col_w[:it].copy(), it, converged, last_eps


@njit(cache=True)
def _sinkhorn_backward(dplan, plan, row_w, col_w, eps):
    n = plan.shape[0]
    dC = np.empty((n, 2))
    df = np.empty(n)
    dg0 = 0.0
    dg1 = 0.0
    for i in range(n):
        d0 = dplan[i, 0] * plan[i, 0] / eps
        d1 = dplan[i, 1] * plan[i, 1] / eps
        df[i] = d0 + d1
        dg0 += d0
        dg1 += d1
        dC[i, 0] = -d0
        dC[i, 1] = -d1
    for t in range(row_w.shape[0] - 1, -1, -1):
        # g_t = eps*log(nu) - eps*LSE_i((f_t - C)/eps); epsilon cancels in the partials
        ng0 = 0.0
        ng1 = 0.0
        for i in range(n):
            p0 = col_w[t, i, 0]
            p1 = col_w[t, i, 1]
            dfi = df[i] - p0 * dg0 - p1 * dg1
            dC[i, 0] += p0 * dg0
            dC[i, 1] += p1 * dg1
            # f_t = eps*log(mu) - eps*LSE_j((g_{t-1} - C)/eps)
            r0 = row_w[t, i]
            dC[i, 0] += r0 * dfi
            dC[i, 1] += (1.0 - r0) * dfi
            ng0 -= r0 * dfi
            ng1 -= (1.0 - r0) * dfi
            # earlier f iterates reach the plan only through g
            df[i] = 0.0
        dg0 = ng0
        dg1 = ng1
    return dC


def sinkhorn(cost: Tensor, k: int, cfg: TopkConfig = TopkConfig()) -> TransportPlan:
    """Entropic plan between uniform rows and the (k/n, (n-k)/n) columns.

    Alternates exact row and column potential updates in the log domain and
    stops once the row-marginal violation drops to ``cfg.tol``. The
    regularisation is annealed geometrically from ``cfg.eps_start`` down to
    ``cfg.epsilon`` (potentials carried over), and convergence is only tested
    at the target value. The backward pass differentiates through every
    iteration that ran. Both passes are compiled loops over float64.
    """
    if cost.ndim != 2 or cost.shape[1] != 2:
        raise ValueError(f"cost must be (n, 2), got {cost.shape}")
    n = cost.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n={n}, got {k}")
    C = np.ascontiguousarray(cost.data, dtype=np.float64)
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    mu, nu = topk_marginals(n, k)
    plan, row_w, col_w, it, converged, eps = _sinkhorn_forward(
        C, float(k), cfg.epsilon, cfg.eps_start, cfg.eps_decay, cfg.max_iters, cfg.tol
    )

    def bw(dplan):
        return (_sinkhorn_backward(np.ascontiguousarray(dplan, dtype=np.float64), plan, row_w, col_w, eps),)

    gamma = T._make(cost.graph, plan, (cost,), bw)
    return TransportPlan(gamma, mu, nu, int(it), bool(converged))


def soft_indicator(plan: TransportPlan) -> Tensor:
    """n times the first plan column: a relaxed membership in the top k."""
    n = plan.gamma.shape[0]
    return T.scalar_mul(T.column(plan.gamma, 0), float(n))


def hard_topk(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending, ties to the lower index."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    if s.ndim != 1:
        raise ValueError("scores must be a vector")
    k = check_k(k, s.shape[0])
    order = np.argsort(-s, kind="stable")
    return order[:k].astype(np.int64)


def straight_through_gate(omega: Tensor, indices) -> Tensor:
    """Gates that read exactly 1 but pass gradient to ``omega[indices]``."""
    idx = np.asarray(indices, dtype=np.intp)
    n = omega.shape[0]

    def bw(g):
        out = np.zeros(n, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return T._make(omega.graph, np.ones(idx.size), (omega,), bw)


def straight_through_select(cloud: PointCloud, scores: Tensor, k: int, cfg: TopkConfig = TopkConfig()):
    """Hard top-k subset in the forward pass, smooth indicator in the backward pass.

    Returns ``(result, gates, plan)``.
    """
    n = cloud.n
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < n={n}, got {k}")
    if scores.shape != (n,):
        raise ValueError(f"expected {n} scores, got shape {scores.shape}")
    idx = hard_topk(scores, k)
    plan = sinkhorn(build_cost(scores), k, cfg)
    omega = soft_indicator(plan)
    gates = straight_through_gate(omega, idx)
    return SampleResult.from_indices(cloud, idx, "csnet"), gates, plan
