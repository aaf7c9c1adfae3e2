"""SMPL-structured parametric body: shape blend, joint regression, forward
kinematics and linear blend skinning, all differentiable through
:mod:`pcmesh.tensor`.

Rotations are full 3x3 matrices throughout.  Pose-dependent blend shapes are
not modelled.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .archive import load_archive, save_archive

NUM_BETAS = 10


@dataclass(frozen=True)
class BodyModel:
    template_vertices: np.ndarray  # (M, 3) meters
    shape_basis: np.ndarray  # (M, 3, S)
    joint_regressor: np.ndarray  # (K, M)
    skinning_weights: np.ndarray  # (M, K)
    parents: np.ndarray  # (K,), root = -1
    vertex_part_labels: np.ndarray  # (M,)
    faces: np.ndarray  # (F, 3)
    eval_subset: np.ndarray
    joint_names: tuple = ()

    def __post_init__(self):
        validate_model(self)

    @property
    def num_joints(self) -> int:
        return int(self.parents.shape[0])

    @property
    def num_vertices(self) -> int:
        return int(self.template_vertices.shape[0])

    @property
    def num_betas(self) -> int:
        return int(self.shape_basis.shape[2])

    @property
    def height(self) -> float:
        y = self.template_vertices[:, 1]
        return float(y.max() - y.min())


@dataclass
class BodyParams:
    betas: np.ndarray
    root_rotation: np.ndarray
    local_rotations: np.ndarray  # (K-1, 3, 3)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def rotations(self) -> np.ndarray:
        return np.concatenate([self.root_rotation[None], self.local_rotations], axis=0)

    @classmethod
    def identity(cls, num_joints: int, num_betas: int = NUM_BETAS) -> "BodyParams":
        return cls(
            betas=np.zeros(num_betas),
            root_rotation=np.eye(3),
            local_rotations=np.tile(np.eye(3), (num_joints - 1, 1, 1)),
            translation=np.zeros(3),
        )


class RotationInvariantError(ValueError):
    pass


def validate_model(model: BodyModel) -> None:
    M = model.template_vertices.shape[0]
    K = model.parents.shape[0]
    if model.shape_basis.shape[:2] != (M, 3):
        raise ValueError(f"shape_basis extents {model.shape_basis.shape} do not match M={M}")
    if model.joint_regressor.shape != (K, M) or model.skinning_weights.shape != (M, K):
        raise ValueError("joint_regressor / skinning_weights extents disagree with K, M")
    par = np.asarray(model.parents)
    if par[0] != -1 or np.count_nonzero(par < 0) != 1:
        raise ValueError(f"parents must have exactly one root at index 0: {par.tolist()}")
    if np.any(par[1:] >= np.arange(1, K)):
        raise ValueError("parents must precede their children")
    if not np.allclose(model.skinning_weights.sum(1), 1.0, atol=1e-5):
        raise ValueError("skinning weight rows must sum to 1")
    if not np.allclose(model.joint_regressor.sum(1), 1.0, atol=1e-5):
        raise ValueError("joint regressor rows must sum to 1")
    if np.any(model.skinning_weights < 0) or np.any(model.joint_regressor < 0):
        raise ValueError("skinning weights and regressor must be nonnegative")


# ---------------------------------------------------------------- forward model

def _const(arr, dtype) -> T.Tensor:
    return T.Tensor(np.asarray(arr, dtype=dtype))


def shape_blend(model: BodyModel, betas, dtype=None) -> tuple[T.Tensor, T.Tensor]:
    """Shaped rest vertices (M, 3) and rest joints (K, 3)."""
    b = betas if isinstance(betas, T.Tensor) else T.Tensor(np.asarray(betas, dtype=dtype or np.float64))
    dtype = b.dtype
    M, _, S = model.shape_basis.shape
    if b.shape != (S,):
        raise ValueError(f"betas must have {S} entries, got shape {b.shape}")
    basis = _const(model.shape_basis.reshape(3 * M, S), dtype)
    offsets = T.reshape(T.matmul(basis, T.reshape(b, (S, 1))), (M, 3))
    shaped = T.add(_const(model.template_vertices, dtype), offsets)
    joints = T.matmul(_const(model.joint_regressor, dtype), shaped)
    return shaped, joints


def lbs_forward(
    model: BodyModel,
    betas,
    root_rotation,
    local_rotations,
    translation=None,
    check_rotations: bool = False,
) -> tuple[T.Tensor, T.Tensor]:
    """Posed mesh vertices (M, 3) and posed joints (K, 3).

    Any argument may be a Tensor (gradients flow) or an array.  With
    ``check_rotations`` every rotation must be orthonormal to 1e-3.
    """
    K = model.num_joints
    dtype = next(
        (x.dtype for x in (betas, root_rotation, local_rotations) if isinstance(x, T.Tensor)),
        np.float64,
    )
    betas, root_rotation, local_rotations = (
        x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=dtype))
        for x in (betas, root_rotation, local_rotations)
    )
    for name, x in (("betas", betas), ("root_rotation", root_rotation), ("local_rotations", local_rotations)):
        if not np.all(np.isfinite(x.data)):
            raise ValueError(f"non-finite {name}")
    root = T.reshape(root_rotation, (1, 3, 3))
    local = T.reshape(local_rotations, (K - 1, 3, 3))
    rots = T.concat([root, local], axis=0)
    if check_rotations:
        rr = rots.data
        err = np.linalg.norm(rr @ np.swapaxes(rr, 1, 2) - np.eye(3), axis=(1, 2))
        if np.any(err >= 1e-3):
            raise RotationInvariantError(f"rotation not orthonormal (max err {err.max():.2e})")

    shaped, joints = shape_blend(model, betas)
    parents = model.parents
    rel = T.sub(joints, T.gather_rows(joints, np.maximum(parents, 0)))

    world_rot: list[T.Tensor] = [T.index(rots, 0)]
    world_t: list[T.Tensor] = [T.reshape(T.index(joints, 0), (3, 1))]
    for k in range(1, K):
        p = parents[k]
        world_rot.append(T.matmul(world_rot[p], T.index(rots, k)))
        offset = T.matmul(world_rot[p], T.reshape(T.index(rel, k), (3, 1)))
        world_t.append(T.add(world_t[p], offset))
    rot_all = T.concat([T.reshape(r, (1, 3, 3)) for r in world_rot], axis=0)
    t_all = T.reshape(T.concat(world_t, axis=1).T, (K, 3))

    # skinning transform of joint k: x -> R_k x + (t_k - R_k J_k)
    rj = T.reshape(T.matmul(rot_all, T.reshape(joints, (K, 3, 1))), (K, 3))
    skin_t = T.sub(t_all, rj)
    per_joint = T.concat([T.reshape(rot_all, (K, 9)), skin_t], axis=1)
    blended = T.matmul(_const(model.skinning_weights, dtype), per_joint)  # (M, 12)
    M = model.num_vertices
    blend_rot = T.reshape(T.index(blended, (slice(None), slice(0, 9))), (M, 3, 3))
    blend_t = T.index(blended, (slice(None), slice(9, 12)))
    verts = T.add(T.reshape(T.matmul(blend_rot, T.reshape(shaped, (M, 3, 1))), (M, 3)), blend_t)
    posed_joints = t_all
    if translation is not None:
        tr = translation if isinstance(translation, T.Tensor) else T.Tensor(np.asarray(translation, dtype=dtype))
        tr = T.reshape(tr, (1, 3))
        verts = T.add(verts, tr)
        posed_joints = T.add(posed_joints, tr)
    return verts, posed_joints


def posed_mesh(model: BodyModel, params: BodyParams, check_rotations: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Numpy convenience wrapper around :func:`lbs_forward` in float64."""
    v, j = lbs_forward(
        model,
        np.asarray(params.betas, dtype=np.float64),
        np.asarray(params.root_rotation, dtype=np.float64),
        np.asarray(params.local_rotations, dtype=np.float64),
        np.asarray(params.translation, dtype=np.float64),
        check_rotations=check_rotations,
    )
    return v.data, j.data


def eval_subset_vertices(model: BodyModel, vertices: np.ndarray) -> np.ndarray:
    idx = np.asarray(model.eval_subset, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(vertices)):
        raise IndexError(f"eval subset index out of range for {len(vertices)} vertices")
    return np.asarray(vertices)[idx]


def default_eval_subset(num_vertices: int) -> np.ndarray:
    """Every fourth vertex; 1723 of the 6890 SMPL vertices."""
    return np.arange(0, num_vertices, 4)


# ---------------------------------------------------------------- toy body

# (name, parent, joint position, bone end, capsule radius); parents precede
# children so every prefix is itself a valid tree.  Feet point forward (+z),
# knees bend forward, forearms and head lean forward and the torso is
# flatter at the back than at the front, so the body's facing direction can
# be read from any part of it.
_SKELETON = [
    ("pelvis", -1, (0.0, 0.95, 0.0), (0.0, 1.15, 0.0), 0.13),
    ("spine", 0, (0.0, 1.15, 0.0), (0.0, 1.35, 0.0), 0.13),
    ("chest", 1, (0.0, 1.35, 0.0), (0.0, 1.50, 0.0), 0.14),
    ("head", 2, (0.0, 1.56, 0.0), (0.0, 1.73, 0.04), 0.09),
    ("l_hip", 0, (0.09, 0.90, 0.0), (0.09, 0.52, 0.05), 0.07),
    ("r_hip", 0, (-0.09, 0.90, 0.0), (-0.09, 0.52, 0.05), 0.07),
    ("l_shoulder", 2, (0.19, 1.45, 0.0), (0.45, 1.45, 0.0), 0.05),
    ("r_shoulder", 2, (-0.19, 1.45, 0.0), (-0.45, 1.45, 0.0), 0.05),
    ("l_knee", 4, (0.09, 0.52, 0.05), (0.09, 0.10, 0.0), 0.055),
    ("r_knee", 5, (-0.09, 0.52, 0.05), (-0.09, 0.10, 0.0), 0.055),
    ("l_elbow", 6, (0.45, 1.45, 0.0), (0.67, 1.45, 0.12), 0.04),
    ("r_elbow", 7, (-0.45, 1.45, 0.0), (-0.67, 1.45, 0.12), 0.04),
    ("l_ankle", 8, (0.09, 0.10, 0.0), (0.09, 0.04, 0.15), 0.04),
    ("r_ankle", 9, (-0.09, 0.10, 0.0), (-0.09, 0.04, 0.15), 0.04),
    ("l_wrist", 10, (0.67, 1.45, 0.12), (0.74, 1.45, 0.16), 0.03),
    ("r_wrist", 11, (-0.67, 1.45, 0.12), (-0.74, 1.45, 0.16), 0.03),
    ("l_foot", 12, (0.09, 0.04, 0.15), (0.09, 0.03, 0.21), 0.03),
    ("r_foot", 13, (-0.09, 0.04, 0.15), (-0.09, 0.03, 0.21), 0.03),
    ("l_hand", 14, (0.74, 1.45, 0.16), (0.82, 1.45, 0.20), 0.025),
    ("r_hand", 15, (-0.74, 1.45, 0.16), (-0.82, 1.45, 0.20), 0.025),
    ("l_toes", 16, (0.09, 0.03, 0.21), (0.09, 0.03, 0.25), 0.02),
    ("r_toes", 17, (-0.09, 0.03, 0.21), (-0.09, 0.03, 0.25), 0.02),
    ("l_fingers", 18, (0.82, 1.45, 0.20), (0.88, 1.45, 0.23), 0.015),
    ("r_fingers", 19, (-0.82, 1.45, 0.20), (-0.88, 1.45, 0.23), 0.015),
]
MAX_TOY_JOINTS = len(_SKELETON)
TORSO = (0, 1, 2)
TORSO_DEPTH = (0.85, 0.6)  # front and back radius relative to side-to-side


def _perp_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def _stitch(a: list[int], b: list[int]) -> list[tuple[int, int, int]]:
    """Triangulate the band between two closed vertex rings of any sizes."""
    na, nb = len(a), len(b)
    tris = []
    i = j = 0
    while i < na or j < nb:
        if j == nb or (i < na and (i + 1) * nb <= (j + 1) * na):
            tris.append((a[i % na], a[(i + 1) % na], b[j % nb]))
            i += 1
        else:
            tris.append((a[i % na], b[(j + 1) % nb], b[j % nb]))
            j += 1
    return tris


def _capsule(start, end, radius, count, offset, depth=(1.0, 1.0)):
    """Vertices, faces and ring-0 indices of a capsule with exactly ``count`` vertices.

    ``depth = (front, back)`` scales the cross-section along the second
    perpendicular axis, on either side; for a bone pointing up that axis is
    -z, so "front" is the +z half.  Unequal values give a lopsided section.
    """
    start, end = np.asarray(start, float), np.asarray(end, float)
    length = np.linalg.norm(end - start)
    axis = (end - start) / length
    u, w = _perp_basis(axis)
    n_poles = 2 if count >= 5 else 1
    ring_total = count - n_poles
    n_rings = int(np.clip(round(np.sqrt(ring_total * length / (2 * np.pi * radius))), 1, ring_total // 3))
    sizes = [ring_total // n_rings + (1 if r < ring_total % n_rings else 0) for r in range(n_rings)]

    verts, rings = [], []
    for r, size in enumerate(sizes):
        t = r / (n_rings - 1) if n_rings > 1 else 0.0
        centre = start + t * (end - start)
        ring = []
        for m in range(size):
            ang = 2 * np.pi * m / size
            ring.append(offset + len(verts))
            d = depth[0] if np.sin(ang) < 0 else depth[1]
            verts.append(centre + radius * (np.cos(ang) * u + d * np.sin(ang) * w))
        rings.append(ring)
    faces = []
    for r in range(n_rings - 1):
        faces += _stitch(rings[r], rings[r + 1])
    end_pole = offset + len(verts)
    verts.append(end + 0.6 * radius * axis)
    last = rings[-1]
    faces += [(last[m], last[(m + 1) % len(last)], end_pole) for m in range(len(last))]
    first = rings[0]
    if n_poles == 2:
        start_pole = offset + len(verts)
        verts.append(start - 0.6 * radius * axis)
        faces += [(first[(m + 1) % len(first)], first[m], start_pole) for m in range(len(first))]
    else:
        faces.append((first[2], first[1], first[0]))
    return np.array(verts), faces, first


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ab = b - a
    t = np.clip(((points - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1), closest


def make_toy_model(num_joints: int = 16, num_vertices: int = 400, seed: int = 0) -> BodyModel:
    """Deterministic capsule-limb humanoid with the first ``num_joints`` joints.

    ``seed`` only jitters capsule radii by a few percent so different seeds
    give distinct but comparable bodies.
    """
    if not 2 <= num_joints <= MAX_TOY_JOINTS:
        raise ValueError(f"num_joints must be in [2, {MAX_TOY_JOINTS}], got {num_joints}")
    if num_vertices < 4 * num_joints:
        raise ValueError(f"num_vertices must be >= 4 * num_joints = {4 * num_joints}")
    rng = np.random.default_rng(seed)
    table = _SKELETON[:num_joints]
    K = num_joints
    parents = np.array([row[1] for row in table], dtype=np.int64)
    starts = np.array([row[2] for row in table], dtype=float)
    ends = np.array([row[3] for row in table], dtype=float)
    radii = np.array([row[4] for row in table]) * (1.0 + 0.03 * rng.uniform(-1, 1, K))

    lengths = np.linalg.norm(ends - starts, axis=1)
    area = (lengths + radii) * radii
    extra = num_vertices - 4 * K
    share = area / area.sum() * extra
    counts = 4 + np.floor(share).astype(int)
    for k in np.argsort(-(share - np.floor(share)), kind="stable")[: num_vertices - counts.sum()]:
        counts[k] += 1

    verts, faces, owner = [], [], []
    regressor = np.zeros((K, num_vertices))
    for k in range(K):
        depth = TORSO_DEPTH if k in TORSO else (1.0, 1.0)
        v, f, ring0 = _capsule(starts[k], ends[k], radii[k], int(counts[k]), len(owner), depth)
        regressor[k, ring0] = 1.0 / len(ring0)
        verts.append(v)
        faces += f
        owner += [k] * len(v)
    V = np.concatenate(verts)
    owner = np.array(owner)

    dist = np.stack([_segment_distance(V, starts[k], ends[k])[0] for k in range(K)], axis=1)
    labels = np.argmin(dist, axis=1)
    sigma = 0.03
    w = np.exp(-(((dist - dist.min(1, keepdims=True)) / sigma) ** 2))
    w[w < 1e-4] = 0.0
    w /= w.sum(1, keepdims=True)

    basis = _toy_shape_basis(V, owner, starts, ends)
    return BodyModel(
        template_vertices=V,
        shape_basis=basis,
        joint_regressor=regressor,
        skinning_weights=w,
        parents=parents,
        vertex_part_labels=labels,
        faces=np.array(faces, dtype=np.int64),
        eval_subset=default_eval_subset(num_vertices),
        joint_names=tuple(row[0] for row in table),
    )


def _toy_shape_basis(V, owner, starts, ends) -> np.ndarray:
    M = len(V)
    pelvis = np.array(_SKELETON[0][2])
    q = V - pelvis
    radial = np.zeros_like(V)
    for k in range(len(starts)):
        sel = owner == k
        _, closest = _segment_distance(V[sel], starts[k], ends[k])
        d = V[sel] - closest
        n = np.linalg.norm(d, axis=1, keepdims=True)
        radial[sel] = np.where(n > 1e-9, d / np.maximum(n, 1e-9), 0.0)
    torso = np.isin(owner, TORSO)[:, None]
    x, y, z = V[:, 0], V[:, 1], V[:, 2]
    zeros = np.zeros(M)
    fields = [
        np.stack([zeros, 0.04 * q[:, 1], zeros], 1),
        0.02 * q,
        0.008 * radial,
        0.015 * radial * torso,
        np.stack([0.03 * q[:, 0], zeros, zeros], 1),
        np.stack([zeros, zeros, 0.03 * q[:, 2]], 1),
        np.stack([0.05 * np.sign(x) * np.maximum(np.abs(x) - 0.19, 0), zeros, zeros], 1),
        np.stack([zeros, 0.05 * np.minimum(y - 0.92, 0), zeros], 1),
        np.stack([zeros, zeros, 0.1 * np.maximum(z, 0)], 1) * torso,
        np.stack([0.02 * np.sign(x) * np.clip((y - 1.2) / 0.3, 0, 1), zeros, zeros], 1),
    ]
    return np.stack(fields, axis=2)


# ---------------------------------------------------------------- assets

_ASSET_KEYS = (
    "template",
    "shape_basis",
    "joint_regressor",
    "skinning_weights",
    "parents",
    "part_labels",
    "faces",
    "eval_subset",
)


def save_body_model(path: str | os.PathLike, model: BodyModel) -> None:
    save_archive(
        path,
        dict(
            zip(
                _ASSET_KEYS,
                (
                    model.template_vertices,
                    model.shape_basis,
                    model.joint_regressor,
                    model.skinning_weights,
                    model.parents,
                    model.vertex_part_labels,
                    model.faces,
                    model.eval_subset,
                ),
            )
        ),
    )


def load_body_model(path: str | os.PathLike) -> BodyModel:
    entries = load_archive(path)
    missing = [k for k in _ASSET_KEYS if k not in entries]
    if missing:
        raise KeyError(f"{path}: body-model asset lacks {missing}")
    f64 = {k: np.asarray(entries[k], dtype=np.float64) for k in _ASSET_KEYS}
    return BodyModel(
        template_vertices=f64["template"],
        shape_basis=f64["shape_basis"],
        joint_regressor=_renormalize(f64["joint_regressor"]),
        skinning_weights=_renormalize(f64["skinning_weights"]),
        parents=f64["parents"].astype(np.int64),
        vertex_part_labels=f64["part_labels"].astype(np.int64),
        faces=f64["faces"].astype(np.int64),
        eval_subset=f64["eval_subset"].astype(np.int64),
    )


def _renormalize(rows: np.ndarray) -> np.ndarray:
    # float32 storage can drift row sums by ~1e-7
    return rows / rows.sum(axis=1, keepdims=True)


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrices from axis-angle vectors (..., 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = np.where(theta > 1e-12, aa / np.maximum(theta, 1e-12), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    Kx = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(aa.shape[:-1] + (3, 3))
    th = theta[..., None]
    eye = np.broadcast_to(np.eye(3), Kx.shape)
    return eye + np.sin(th) * Kx + (1 - np.cos(th)) * (Kx @ Kx)


def import_smpl_npz(path: str | os.PathLike) -> BodyModel:
    """Build a BodyModel from an SMPL model exported to ``.npz``.

    Expects the usual keys ``v_template``, ``shapedirs``, ``J_regressor``,
    ``weights``, ``kintree_table`` and ``f``.  Part labels come from the
    dominant skinning weight.
    """
    d = np.load(path, allow_pickle=False)
    weights = np.asarray(d["weights"], dtype=np.float64)
    reg = np.asarray(d["J_regressor"], dtype=np.float64)
    parents = np.asarray(d["kintree_table"])[0].astype(np.int64).copy()
    parents[0] = -1
    template = np.asarray(d["v_template"], dtype=np.float64)
    return BodyModel(
        template_vertices=template,
        shape_basis=np.asarray(d["shapedirs"], dtype=np.float64)[:, :, :NUM_BETAS],
        joint_regressor=np.clip(reg, 0, None) / np.clip(reg, 0, None).sum(1, keepdims=True),
        skinning_weights=weights / weights.sum(1, keepdims=True),
        parents=parents,
        vertex_part_labels=np.argmax(weights, axis=1),
        faces=np.asarray(d["f"], dtype=np.int64),
        eval_subset=default_eval_subset(len(template)),
    )
