"""End-to-end network: backbone, votes, clustering, completion, parameter
heads and skinning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, GroupingPlan, PointFeatures, make_plan
from .body import BodyModel, BodyParams, lbs_forward, posed_mesh
from .regressors import GlobalHead, LocalHead, project_rotations
from .voting import VISIBILITY_THRESHOLD, JointCompletion, JointSet, VoteSet, VotingModule, cluster_votes


@dataclass
class Forward:
    features: PointFeatures
    votes: VoteSet
    joints: JointSet
    betas: T.Tensor
    rotations: T.Tensor  # (K, 3, 3) raw, root first
    translation: T.Tensor
    vertices: T.Tensor
    posed_joints: T.Tensor


class MeshRecoveryNet(T.Module):
    def __init__(self, body: BodyModel, seed: int = 0, max_neighbors: int = 32, threshold: float = VISIBILITY_THRESHOLD):
        rng = np.random.default_rng(seed)
        self.body = body
        self.threshold = threshold
        K = body.num_joints
        self.backbone = Backbone(rng, max_neighbors)
        self.voting = VotingModule(K, rng)
        self.completion = JointCompletion(K, rng)
        self.global_head = GlobalHead(rng, body.num_betas)
        self.local_head = LocalHead(body.parents, rng)

    def plan(self, points: np.ndarray) -> GroupingPlan:
        return make_plan(points, self.backbone.max_neighbors)

    def __call__(self, points: np.ndarray, plan: GroupingPlan | None = None) -> Forward:
        feats = self.backbone(points, plan)
        votes = self.voting(feats)
        joints = self.completion(cluster_votes(feats.coords, votes, self.threshold))
        betas, root = self.global_head(feats.global_feature, joints.completed_features)
        local = self.local_head(joints.completed_positions, joints.completed_features)
        rotations = T.concat([T.reshape(root, (1, 3, 3)), local], axis=0)
        verts, pj = lbs_forward(self.body, betas, root, local)
        # the root joint pivots in place, so translating it onto the completed root position
        translation = T.sub(T.index(joints.completed_positions, 0), T.index(pj, 0))
        tr = T.reshape(translation, (1, 3))
        return Forward(feats, votes, joints, betas, rotations, translation, T.add(verts, tr), T.add(pj, tr))


@dataclass
class Prediction:
    params: BodyParams
    vertices: np.ndarray
    joints: np.ndarray
    raw_rotations: np.ndarray
    rotation_ok: np.ndarray
    part_labels: np.ndarray
    voted_positions: np.ndarray
    joint_positions: np.ndarray  # clustered c_k
    completed_positions: np.ndarray
    visible: np.ndarray


def finalize(net: MeshRecoveryNet, out: Forward, points: np.ndarray) -> Prediction:
    """Project rotations onto SO(3) and rebuild the mesh from the finalized parameters."""
    rots, ok = project_rotations(out.rotations.data.astype(np.float64))
    betas = out.betas.data.astype(np.float64)
    root_pos = out.joints.completed_positions.data[0].astype(np.float64)
    params = BodyParams(betas=betas, root_rotation=rots[0], local_rotations=rots[1:])
    _, rest = posed_mesh(net.body, params)
    params.translation = root_pos - rest[0]
    verts, joints = posed_mesh(net.body, params)
    return Prediction(
        params=params,
        vertices=verts,
        joints=joints,
        raw_rotations=out.rotations.data.astype(np.float64),
        rotation_ok=ok,
        part_labels=np.argmax(out.votes.seg_scores.data, axis=1),
        voted_positions=np.asarray(points) + out.votes.offsets.data,
        joint_positions=out.joints.positions.data.astype(np.float64),
        completed_positions=out.joints.completed_positions.data.astype(np.float64),
        visible=out.joints.visible.copy(),
    )


def predict(net: MeshRecoveryNet, points: np.ndarray, plan: GroupingPlan | None = None) -> Prediction:
    return finalize(net, net(points, plan), points)
