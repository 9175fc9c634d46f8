"""Shape-preservation distances between a sampled cloud and its input."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .pointcloud import PointCloud

__all__ = [
    "Matching",
    "pairwise_sq_dists",
    "chamfer",
    "emd",
    "emd_brute_force",
    "emd_grad_wrt_weights",
    "gated_emd_value",
]


def _pts(c) -> np.ndarray:
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("point set must be a non-empty (n, 3) array")
    return np.asarray(pts, dtype=np.float64)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared distances via explicit differences (no Gram-matrix cancellation)."""
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chamfer(a, b) -> float:
    """Mean nearest-neighbour squared distance, summed over both directions."""
    pa, pb = _pts(a), _pts(b)
    d = pairwise_sq_dists(pa, pb)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


@dataclass(frozen=True)
class Matching:
    """Injective assignment of sampled rows into input rows."""

    assignment: np.ndarray
    cost: float
    sq_dists: np.ndarray

    def __post_init__(self):
        if np.unique(self.assignment).size != self.assignment.size:
            raise ValueError("matching is not injective")


def emd(sampled, input_cloud) -> tuple[float, Matching]:
    """Exact EMD: minimum mean squared distance over injections sampled -> input."""
    ps, pi = _pts(sampled), _pts(input_cloud)
    if ps.shape[0] > pi.shape[0]:
        raise ValueError(f"sampled cloud ({ps.shape[0]}) larger than input ({pi.shape[0]})")
    cost = pairwise_sq_dists(ps, pi)
    rows, cols = linear_sum_assignment(cost)
    assignment = np.empty(ps.shape[0], dtype=np.int64)
    assignment[rows] = cols
    sq = cost[np.arange(ps.shape[0]), assignment]
    value = float(sq.sum() / ps.shape[0])
    return value, Matching(assignment, value, sq)


def emd_brute_force(sampled, input_cloud) -> tuple[float, np.ndarray]:
    """Enumerate every injection; for tiny instances only."""
    ps, pi = _pts(sampled), _pts(input_cloud)
    m, n = ps.shape[0], pi.shape[0]
    if m > n:
        raise ValueError("sampled cloud larger than input")
    cost = pairwise_sq_dists(ps, pi)
    best, best_perm = np.inf, None
    rows = np.arange(m)
    for perm in itertools.permutations(range(n), m):
        c = cost[rows, perm].sum()
        if c < best:
            best, best_perm = c, perm
    return float(best / m), np.asarray(best_perm, dtype=np.int64)


def gated_emd_value(matching: Matching, gates) -> float:
    g = np.asarray(gates, dtype=np.float64)
    return float((g * matching.sq_dists).sum() / matching.sq_dists.size)


def emd_grad_wrt_weights(matching: Matching, gates) -> np.ndarray:
    """d/dgate_j of sum_j gate_j * |p_j - phi(j)|^2 / k with the matching held fixed."""
    g = np.asarray(gates)
    if g.shape != matching.sq_dists.shape:
        raise ValueError(f"expected {matching.sq_dists.size} gates, got shape {g.shape}")
    return matching.sq_dists / matching.sq_dists.size
