"""Parametric body-mesh recovery from single partial point clouds via
per-point joint voting, occlusion-aware joint completion and graph-based
rotation regression, on a small numpy autodiff engine."""

from .body import BodyModel, BodyParams, lbs_forward, make_toy_model, posed_mesh
from .losses import LossWeights, mesh_metrics
from .model import MeshRecoveryNet, predict
from .pipeline import RunConfig, evaluate, infer, train

__all__ = [
    "BodyModel",
    "BodyParams",
    "LossWeights",
    "MeshRecoveryNet",
    "RunConfig",
    "evaluate",
    "infer",
    "lbs_forward",
    "make_toy_model",
    "mesh_metrics",
    "posed_mesh",
    "predict",
    "train",
]
