"""Per-point votes, their soft clustering into joints, and occlusion-aware
completion of the joint set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FEATURE_DIM, GLOBAL_DIM, PointFeatures

VISIBILITY_THRESHOLD = 0.1
COMPLETION_HIDDEN = 512


@dataclass
class VoteSet:
    seg_scores: T.Tensor  # (N, K), rows on the simplex
    offsets: T.Tensor  # (N, 3)
    features: T.Tensor  # (N, F1)


@dataclass
class JointSet:
    positions: T.Tensor  # (K, 3), zero where invisible
    features: T.Tensor  # (K, F1), zero where invisible
    visible: np.ndarray  # (K,) bool
    confidence: np.ndarray  # (K,)
    completed_positions: T.Tensor | None = None  # (K, 3)
    completed_features: T.Tensor | None = None  # (K, F2)


class VotingModule(T.Module):
    """Shared two-layer trunk followed by segmentation, offset and feature heads."""

    def __init__(self, num_joints: int, rng: np.random.Generator, width: int = 128):
        self.trunk = T.MLP([FEATURE_DIM, width, width], rng)
        self.seg_head = T.Linear(width, num_joints, rng)
        self.offset_head = T.Linear(width, 3, rng, scale=0.01)
        self.feature_head = T.Linear(width, FEATURE_DIM, rng, scale=0.01)

    def __call__(self, point_features: PointFeatures) -> VoteSet:
        b = point_features.features
        h = self.trunk(b)
        return VoteSet(
            seg_scores=T.softmax(self.seg_head(h), axis=1),
            offsets=self.offset_head(h),
            features=T.add(b, self.feature_head(h)),
        )


def cluster_votes(points, votes: VoteSet, threshold: float = VISIBILITY_THRESHOLD) -> JointSet:
    """Score-weighted means of voted positions and vote features per joint.

    A joint is visible when its best per-point score reaches ``threshold``;
    invisible joints (including those with zero total score) are zeroed.
    """
    S = votes.seg_scores
    dtype = S.dtype
    P = points if isinstance(points, T.Tensor) else T.Tensor(np.asarray(points, dtype=dtype))
    total = T.sum(S, axis=0)  # (K,)
    confidence = S.data.max(axis=0)
    visible = (confidence >= threshold) & (total.data > 0)
    safe = T.add(total, (total.data == 0).astype(dtype))
    denom = T.reshape(safe, (-1, 1))
    mask = T.Tensor(visible.astype(dtype)[:, None])
    St = T.transpose(S)
    positions = T.mul(T.div(T.matmul(St, T.add(P, votes.offsets)), denom), mask)
    features = T.mul(T.div(T.matmul(St, votes.features), denom), mask)
    return JointSet(positions, features, visible, confidence)


class JointCompletion(T.Module):
    """Flattened two-layer perceptron over all joints, then a per-joint position head."""

    def __init__(self, num_joints: int, rng: np.random.Generator, hidden: int = COMPLETION_HIDDEN):
        self.num_joints = num_joints
        self.hidden = T.Linear(num_joints * (3 + FEATURE_DIM), hidden, rng)
        self.out = T.Linear(hidden, num_joints * GLOBAL_DIM, rng)
        self.position_head = T.Linear(GLOBAL_DIM, 3, rng, scale=0.01)

    def __call__(self, joints: JointSet) -> JointSet:
        K = self.num_joints
        stacked = T.concat([joints.positions, joints.features], axis=1)
        flat = T.reshape(stacked, (1, K * (3 + FEATURE_DIM)))
        q = T.reshape(self.out(T.relu(self.hidden(flat))), (K, GLOBAL_DIM))
        joints.completed_features = q
        joints.completed_positions = self.position_head(q)
        return joints
