"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from numbers import Integral
from typing import Sequence, Union

import numpy as np

from .pointcloud import PointCloud

CloudLike = Union[PointCloud, np.ndarray, Sequence[Sequence[float]]]


def check_cloud(X: CloudLike, name: str = "X") -> PointCloud:
    if isinstance(X, PointCloud):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must be an (n, 3) array of points, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite coordinates")
    return PointCloud(arr)


def check_clouds(X, y=None) -> list[PointCloud]:
    """Normalise X to a list of PointCloud, attaching labels from ``y`` if given.

    X may be an (m, n, 3) array, a list of (n_i, 3) arrays, or PointClouds.
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        items = list(X)
    elif isinstance(X, (PointCloud, np.ndarray)):
        raise ValueError(f"expected a batch of clouds, got a single array of shape {np.shape(X)}")
    else:
        items = list(X)
    if not items:
        raise ValueError("no clouds given")
    clouds = [check_cloud(c, f"X[{i}]") for i, c in enumerate(items)]
    if y is not None:
        labels = np.asarray(y)
        if labels.shape != (len(clouds),):
            raise ValueError(f"y has shape {labels.shape}, expected ({len(clouds)},)")
        clouds = [PointCloud(c.points, int(lbl), c.source_path) for c, lbl in zip(clouds, labels)]
    return clouds


def check_n_samples(k, n: int, strict: bool = False) -> int:
    if isinstance(k, bool) or not isinstance(k, Integral):
        raise TypeError(f"n_samples must be an integer, got {type(k).__name__}")
    hi = n - 1 if strict else n
    if not 1 <= k <= hi:
        raise ValueError(f"n_samples must be in [1, {hi}] for clouds of {n} points, got {k}")
    return int(k)


def stack_results(results) -> np.ndarray:
    """(m, k, 3) when all samples share k, else an object array of (k_i, 3) arrays."""
    arrays = [r.sampled.points for r in results]
    if len({a.shape for a in arrays}) == 1:
        return np.stack(arrays)
    out = np.empty(len(arrays), dtype=object)
    out[:] = arrays
    return out
