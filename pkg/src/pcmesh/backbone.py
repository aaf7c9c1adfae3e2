"""Hierarchical point-feature learner: four set-abstraction levels followed by
four feature-propagation levels with skip connections.

Sampling and grouping depend only on coordinates, so they are computed once
per cloud as a :class:`GroupingPlan` and reused by every forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

FEATURE_DIM = 128
GLOBAL_DIM = 128
SA_WIDTHS = (64, 128, 128, 128)
DECIMATION = (4, 16, 64, 128)
MIN_POINTS = 16  # coarser levels keep at least one center


def farthest_point_sample(coords: np.ndarray, count: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subset; ties go to the lowest index."""
    pts = np.asarray(coords, dtype=np.float64)
    n = len(pts)
    if count > n:
        raise ValueError(f"cannot pick {count} of {n} points")
    sel = np.empty(count, dtype=np.int64)
    if count == 0:
        return sel
    sel[0] = start_index
    dist = np.sum((pts - pts[start_index]) ** 2, axis=1)
    dist[start_index] = -1.0
    for i in range(1, count):
        j = int(np.argmax(dist))
        sel[i] = j
        dist = np.minimum(dist, np.sum((pts - pts[j]) ** 2, axis=1))
        dist[sel[: i + 1]] = -1.0
    return sel


def fps_start(coords: np.ndarray) -> int:
    """Index of the point farthest from the centroid (lowest index on ties), so
    sampling does not depend on the order the points arrive in."""
    pts = np.asarray(coords, dtype=np.float64)
    return int(np.argmax(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))


def ball_query(coords: np.ndarray, centers: np.ndarray, radius: float, max_neighbors: int) -> np.ndarray:
    """Per center, up to ``max_neighbors`` indices within ``radius``, nearest first,
    padded with the nearest point (which is also the fallback for an empty ball)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    d2 = np.sum((centers[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :max_neighbors]
    ds = np.take_along_axis(d2, order, axis=1)
    idx = np.where(ds <= radius * radius, order, order[:, :1])
    if idx.shape[1] < max_neighbors:
        pad = np.repeat(idx[:, :1], max_neighbors - idx.shape[1], axis=1)
        idx = np.concatenate([idx, pad], axis=1)
    return idx


def three_nn_weights(coarse: np.ndarray, fine: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-distance interpolation weights from ``coarse`` onto ``fine`` points."""
    k = min(k, len(coarse))
    d2 = np.sum((fine[:, None, :] - coarse[None, :, :]) ** 2, axis=2)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    d = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    w = 1.0 / (d + 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


@dataclass
class Level:
    coords: np.ndarray  # centers at this level
    neighbors: np.ndarray  # (m, k) indices into the previous level
    rel: np.ndarray  # (m, k, 3) neighbor offsets scaled by the radius
    interp_idx: np.ndarray  # (n_prev, 3) indices into this level, for propagation
    interp_w: np.ndarray


@dataclass
class GroupingPlan:
    coords: np.ndarray
    levels: list[Level]


@dataclass
class PointFeatures:
    coords: np.ndarray
    features: T.Tensor  # (N, FEATURE_DIM)
    global_feature: T.Tensor  # (1, GLOBAL_DIM)


def level_counts(n: int) -> list[int]:
    return [max(n // d, 1) for d in DECIMATION]


def make_plan(points: np.ndarray, max_neighbors: int = 32) -> GroupingPlan:
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite input points")
    n = len(pts)
    if n < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points, got {n}")
    scale = float(np.max(np.linalg.norm(pts - pts.mean(0), axis=1))) or 1.0
    prev = pts
    levels = []
    for lvl, m in enumerate(level_counts(n)):
        radius = 0.1 * 2**lvl * scale
        centers = prev[farthest_point_sample(prev, m, fps_start(prev))]
        nbr = ball_query(prev, centers, radius, max_neighbors)
        rel = (prev[nbr] - centers[:, None, :]) / radius
        idx, w = three_nn_weights(centers, prev)
        levels.append(Level(centers, nbr, rel, idx, w))
        prev = centers
    return GroupingPlan(pts, levels)


class Backbone(T.Module):
    def __init__(self, rng: np.random.Generator, max_neighbors: int = 32):
        self.max_neighbors = max_neighbors
        in_dims = [3] + list(SA_WIDTHS[:-1])
        self.sa = [T.MLP([3 + c_in, c_out, c_out], rng) for c_in, c_out in zip(in_dims, SA_WIDTHS)]
        # propagation from level l+1 back to level l; skip features come from level l
        skip_dims = [3] + list(SA_WIDTHS[:-1])
        up_dims = [FEATURE_DIM] * 3 + [SA_WIDTHS[-1]]
        self.fp = [
            T.MLP([up + skip, FEATURE_DIM, FEATURE_DIM], rng)
            for up, skip in zip(up_dims, skip_dims)
        ]
        self.global_proj = T.Linear(SA_WIDTHS[-1], GLOBAL_DIM, rng)

    def __call__(self, points: np.ndarray, plan: GroupingPlan | None = None) -> PointFeatures:
        plan = plan or make_plan(points, self.max_neighbors)
        dtype = self.dtype
        feats = [T.Tensor(plan.coords.astype(dtype))]
        for level, mlp in zip(plan.levels, self.sa):
            grouped = T.gather_rows(feats[-1], level.neighbors)
            x = T.concat([T.Tensor(level.rel.astype(dtype)), grouped], axis=2)
            feats.append(T.max(mlp(x), axis=1))
        up = feats[-1]
        for lvl in reversed(range(len(plan.levels))):
            level = plan.levels[lvl]
            interp = T.scatter_weighted_sum(up, level.interp_idx, level.interp_w)
            up = self.fp[lvl](T.concat([interp, feats[lvl]], axis=1))
        pooled = T.max(feats[-1], axis=0, keepdims=True)
        return PointFeatures(plan.coords, up, self.global_proj(pooled))
