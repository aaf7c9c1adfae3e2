"""Training losses and evaluation metrics.

Losses operate on graph tensors; metrics are plain numpy and report
millimeters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    vote_gen: float = 1.0  # lambda_1
    param_reg: float = 10.0  # lambda_2
    model_fit: float = 10.0  # lambda_3
    vote_reg: float = 0.1  # lambda_11
    seg: float = 1.0  # lambda_12
    smpl: float = 1.0  # lambda_21; 0 when no parameter ground truth
    orth: float = 1.0  # lambda_22
    vertex: float = 1.0  # lambda_31
    chamfer: float = 1.0  # lambda_32
    skeleton: float = 1.0  # lambda_33

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")


def _const(x, ref: T.Tensor) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=ref.dtype))


def seg_loss(seg_scores: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean over points of -log s_i[t_i] (scores floored at 1e-12)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = seg_scores.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels out of range")
    picked = T.index(seg_scores, (np.arange(n), labels))
    return T.mul(T.sum(T.log(T.clamp_min(picked, LOG_FLOOR))), -1.0 / n)


def vote_reg_loss(offsets: T.Tensor, gt_offsets: np.ndarray) -> T.Tensor:
    """Mean over points of the smooth-l1 (transition 1.0) residual to the GT offset,
    summed over coordinates.  ``gt_offsets`` already encode c*_{t_i} - p_i."""
    n = offsets.shape[0]
    return T.mul(T.sum(T.smooth_l1(T.sub(offsets, _const(gt_offsets, offsets)))), 1.0 / n)


def smpl_loss(betas: T.Tensor, rotations: T.Tensor, gt_betas, gt_rotations) -> T.Tensor:
    """||beta - beta*||_1 + sum_k ||R_k - R_k*||_1 (entrywise)."""
    return T.add(
        T.l1_norm(T.sub(betas, _const(gt_betas, betas))),
        T.l1_norm(T.sub(rotations, _const(gt_rotations, rotations))),
    )


def orth_loss(rotations: T.Tensor) -> T.Tensor:
    """sum_k ||R_k R_k^T - I||_F for rotations (K, 3, 3)."""
    gram = T.matmul(rotations, T.transpose(rotations, (0, 2, 1)))
    return T.sum(T.frobenius_norm(T.sub(gram, np.eye(3, dtype=rotations.dtype))))


def param_reg_loss(betas, rotations, gt_betas, gt_rotations, w: LossWeights) -> tuple[T.Tensor, dict]:
    orth = orth_loss(rotations)
    parts = {"orth": orth}
    total = T.mul(orth, w.orth)
    if w.smpl > 0:
        smpl = smpl_loss(betas, rotations, gt_betas, gt_rotations)
        parts["smpl"] = smpl
        total = T.add(total, T.mul(smpl, w.smpl))
    return total, parts


def vertex_loss(pred_vertices: T.Tensor, gt_vertices) -> T.Tensor:
    m = pred_vertices.shape[0]
    return T.mul(T.l1_norm(T.sub(pred_vertices, _const(gt_vertices, pred_vertices))), 1.0 / m)


def chamfer_loss(points, mesh_vertices: T.Tensor) -> T.Tensor:
    """Mean over input points of the distance to the nearest mesh vertex.

    The nearest vertex is found outside the graph; differentiating through
    the selected vertex gives the same subgradient as a min over all of them.
    """
    P = _const(points, mesh_vertices)
    d2 = np.sum((P.data[:, None, :] - mesh_vertices.data[None, :, :]) ** 2, axis=2)
    nearest = np.argmin(d2, axis=1)
    diff = T.sub(P, T.gather_rows(mesh_vertices, nearest))
    return T.mean(T.l2_norm(diff, axis=1))


def skeleton_loss(positions: T.Tensor, gt_joints, mask: np.ndarray | None = None) -> T.Tensor:
    """(1/K) sum_k ||c_k - c*_k||_1 over joints selected by ``mask``."""
    k = positions.shape[0]
    diff = T.absolute(T.sub(positions, _const(gt_joints, positions)))
    if mask is not None:
        diff = T.mul(diff, np.asarray(mask, dtype=positions.dtype)[:, None])
    return T.mul(T.sum(diff), 1.0 / k)


def total_loss(out, sample, w: LossWeights) -> tuple[T.Tensor, dict[str, float]]:
    """Weighted sum of vote-generation, parameter-regression and model-fit terms.

    ``out`` is a forward result of :class:`pcmesh.model.MeshRecoveryNet`;
    ``sample`` a :class:`pcmesh.synth.TrainingSample`.
    """
    l_seg = seg_loss(out.votes.seg_scores, sample.gt_part_labels)
    l_vreg = vote_reg_loss(out.votes.offsets, sample.gt_offsets)
    vote_gen = T.add(T.mul(l_vreg, w.vote_reg), T.mul(l_seg, w.seg))

    param, pparts = param_reg_loss(
        out.betas, out.rotations, sample.gt_params.betas, sample.gt_params.rotations(), w
    )

    l_vert = vertex_loss(out.vertices, sample.gt_vertices)
    l_cd = chamfer_loss(sample.points, out.vertices)
    l_skel = T.add(
        skeleton_loss(out.joints.positions, sample.gt_joints, out.joints.visible),
        skeleton_loss(out.joints.completed_positions, sample.gt_joints),
    )
    fit = T.add(T.add(T.mul(l_vert, w.vertex), T.mul(l_cd, w.chamfer)), T.mul(l_skel, w.skeleton))

    total = T.add(T.add(T.mul(vote_gen, w.vote_gen), T.mul(param, w.param_reg)), T.mul(fit, w.model_fit))
    parts = {
        "total": total,
        "seg": l_seg,
        "vote_reg": l_vreg,
        "vote_gen": vote_gen,
        "param_reg": param,
        "vertex": l_vert,
        "chamfer": l_cd,
        "skeleton": l_skel,
        "model_fit": fit,
        **pparts,
    }
    return total, {k: float(v.data) for k, v in parts.items()}


# ---------------------------------------------------------------- metrics

def chamfer_distance(points: np.ndarray, vertices: np.ndarray) -> float:
    d, _ = cKDTree(vertices).query(points)
    return float(np.mean(d))


def mesh_metrics(
    pred_vertices: np.ndarray,
    gt_vertices: np.ndarray,
    pred_joints: np.ndarray,
    gt_joints: np.ndarray,
    points: np.ndarray | None = None,
    full_pred_vertices: np.ndarray | None = None,
) -> dict[str, float]:
    """PVE, PVE_max, MPJPE and (if points given) half chamfer, in millimeters.

    Vertex arrays should already be restricted to the evaluation subset;
    chamfer uses ``full_pred_vertices`` when provided.
    """
    ve = np.linalg.norm(np.asarray(pred_vertices) - np.asarray(gt_vertices), axis=1)
    je = np.linalg.norm(np.asarray(pred_joints) - np.asarray(gt_joints), axis=1)
    out = {"PVE": 1000 * float(ve.mean()), "PVE_max": 1000 * float(ve.max()), "MPJPE": 1000 * float(je.mean())}
    if points is not None:
        verts = full_pred_vertices if full_pred_vertices is not None else pred_vertices
        out["CD"] = 1000 * chamfer_distance(points, verts)
    return out


def format_metrics(metrics: dict[str, float], **tags) -> str:
    """One ``key=value`` line for harness parsing."""
    fields = [f"{k}={v}" for k, v in tags.items()]
    fields += [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in metrics.items()]
    return " ".join(fields)


def parse_metrics(line: str) -> dict[str, str]:
    return dict(tok.split("=", 1) for tok in line.split())
