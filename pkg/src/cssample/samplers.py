"""Classical index-selecting samplers: random, farthest-point, Poisson-disk."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pointcloud import PointCloud

__all__ = ["SampleResult", "random_sample", "fps", "poisson_disk", "check_k"]


@dataclass(frozen=True, eq=False)
class SampleResult:
    """Selected input indices (in selection order) and the copied rows."""

    indices: np.ndarray
    sampled: PointCloud
    method_tag: str
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_indices(cls, cloud: PointCloud, indices, method_tag: str, **meta) -> "SampleResult":
        idx = np.asarray(indices, dtype=np.int64)
        return cls(idx, PointCloud(cloud.points[idx], cloud.label, cloud.source_path), method_tag, meta)

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def validate(self, cloud: PointCloud) -> None:
        idx = self.indices
        if idx.ndim != 1 or np.unique(idx).size != idx.size:
            raise AssertionError("sample indices are not distinct")
        if idx.size and (idx.min() < 0 or idx.max() >= cloud.n):
            raise AssertionError("sample index out of range")
        if not np.array_equal(self.sampled.points, cloud.points[idx]):
            raise AssertionError("sampled rows differ from input rows")


def check_k(k, n: int) -> int:
    if isinstance(k, bool) or int(k) != k:
        raise ValueError(f"k must be an integer, got {k!r}")
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    return k


def random_sample(cloud: PointCloud, k: int, rng: np.random.Generator) -> SampleResult:
    k = check_k(k, cloud.n)
    perm = rng.permutation(cloud.n)
    return SampleResult.from_indices(cloud, perm[:k], "random")


def fps(cloud: PointCloud, k: int, start_index: int = 0) -> SampleResult:
    """Greedy farthest-point traversal, ties to the lowest index."""
    n = cloud.n
    k = check_k(k, n)
    if not 0 <= start_index < n:
        raise ValueError(f"start_index must be in [0, {n}), got {start_index}")
    pts = cloud.points
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    min_d = ((pts - pts[start_index]) ** 2).sum(axis=1)
    # chosen points get -1 so they never win; fresh zero-distance points still can
    min_d[start_index] = -1.0
    for j in range(1, k):
        nxt = int(np.argmax(min_d))
        selected[j] = nxt
        d = ((pts - pts[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d, d, out=min_d)
        min_d[selected[: j + 1]] = -1.0
    return SampleResult.from_indices(cloud, selected, "fps")


def _dart_throw(pts: np.ndarray, order: np.ndarray, r2: float) -> list[int]:
    """Accept candidates in ``order`` whose squared distance to all accepted is >= r2."""
    n = pts.shape[0]
    blocked = np.zeros(n, dtype=bool)
    accepted = []
    for i in order:
        if blocked[i]:
            continue
        accepted.append(int(i))
        d = ((pts - pts[i]) ** 2).sum(axis=1)
        blocked |= d < r2
    return accepted


def poisson_disk(cloud: PointCloud, k: int, rng: np.random.Generator, rounds: int = 20) -> SampleResult:
    """Dart throwing over input points with a bisected exclusion radius.

    The radius is searched on [0, diameter] until the accepted count lands in
    [k, 1.2k]; the first k accepted points are returned. If no radius gets
    there, the result comes from :func:`fps` and is tagged accordingly.
    """
    n = cloud.n
    k = check_k(k, n)
    pts = cloud.points
    order = rng.permutation(n)
    if k == n:
        return SampleResult.from_indices(cloud, order, "poisson", radius=0.0)
    lo, hi = 0.0, float(np.sqrt(((pts.max(axis=0) - pts.min(axis=0)) ** 2).sum()))
    best, best_r = None, 0.0
    for _ in range(rounds):
        r = 0.5 * (lo + hi)
        acc = _dart_throw(pts, order, r * r)
        if len(acc) < k:
            hi = r
        elif len(acc) > int(1.2 * k):
            lo = r
            if best is None or len(acc) < len(best):
                best, best_r = acc, r
        else:
            return SampleResult.from_indices(cloud, acc[:k], "poisson", radius=r)
    if best is not None:
        # the [k, 1.2k] window was never hit; the tightest oversupply keeps the spacing property
        return SampleResult.from_indices(cloud, best[:k], "poisson", radius=best_r)
    res = fps(cloud, k, int(order[0]))
    return SampleResult(res.indices, res.sampled, "poisson_fallback_fps", {"radius": None})
