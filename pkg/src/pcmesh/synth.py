"""Synthetic partial point clouds rendered from posed bodies.

A posed mesh is z-buffered into a virtual depth camera, every covered pixel
is back-projected to a 3D point, and the points are annotated with the part
label of the nearest mesh vertex and the offset to that part's joint.
Annotations are computed on the clean geometry; noise is added afterwards.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .archive import load_archive, save_archive
from .body import BodyModel, BodyParams, posed_mesh, rodrigues

DEFAULT_POINTS = 2500
DEFAULT_RESOLUTION = (160, 120)
TRAIN_NOISE_SIGMA = 0.010  # meters


class EmptySampleError(RuntimeError):
    """The camera sees none of the mesh."""


@dataclass
class Camera:
    position: np.ndarray
    target: np.ndarray
    width: int = DEFAULT_RESOLUTION[0]
    height: int = DEFAULT_RESOLUTION[1]
    focal: float = 150.0
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; camera axes x right, y down, z forward."""
        fwd = np.asarray(self.target, float) - np.asarray(self.position, float)
        fwd /= np.linalg.norm(fwd)
        down = -np.asarray(self.up, float)
        down = down - (down @ fwd) * fwd
        down /= np.linalg.norm(down)
        right = np.cross(down, fwd)
        return np.stack([right, down, fwd])

    def view_rotation(self) -> np.ndarray:
        """World-to-view rotation; view axes x right, y up, z toward the viewer."""
        return np.diag([1.0, -1.0, -1.0]) @ self.rotation()

    def to_view(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.position) @ self.view_rotation().T

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.position) @ self.rotation().T

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation() + self.position

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.position, self.target, self.up, [self.focal, self.width, self.height]]
        ).astype(np.float64)

    @classmethod
    def from_vector(cls, vec) -> "Camera":
        v = np.asarray(vec, dtype=np.float64)
        return cls(
            position=v[0:3].copy(),
            target=v[3:6].copy(),
            up=v[6:9].copy(),
            focal=float(v[9]),
            width=int(round(v[10])),
            height=int(round(v[11])),
        )


def render_partial(
    vertices: np.ndarray, faces: np.ndarray, camera: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer the mesh; return one world point per covered pixel and its face index."""
    vc = camera.to_camera(vertices)
    W, H, f = camera.width, camera.height, camera.focal
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    near = 1e-3
    z = vc[:, 2]
    uv = np.empty((len(vc), 2))
    front = z > near
    uv[front, 0] = f * vc[front, 0] / z[front] + camera.cx
    uv[front, 1] = f * vc[front, 1] / z[front] + camera.cy

    for fi, (a, b, c) in enumerate(faces):
        if not (front[a] and front[b] and front[c]):
            continue
        tri = uv[[a, b, c]]
        lo = np.floor(tri.min(0) - 0.5).astype(int)
        hi = np.ceil(tri.max(0) - 0.5).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], W - 1), min(hi[1], H - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1]) - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1])
        if abs(area) < 1e-12:
            continue
        px, py = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        w0 = (tri[1, 0] - px) * (tri[2, 1] - py) - (tri[2, 0] - px) * (tri[1, 1] - py)
        w1 = (tri[2, 0] - px) * (tri[0, 1] - py) - (tri[0, 0] - px) * (tri[2, 1] - py)
        w2 = area - w0 - w1
        s = np.sign(area)
        inside = (w0 * s >= 0) & (w1 * s >= 0) & (w2 * s >= 0)
        if not inside.any():
            continue
        # exact depth: intersect each pixel ray with the triangle plane
        p0, p1, p2 = vc[a], vc[b], vc[c]
        n = np.cross(p1 - p0, p2 - p0)
        dx = (px[inside] - camera.cx) / f
        dy = (py[inside] - camera.cy) / f
        denom = n[0] * dx + n[1] * dy + n[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (n @ p0) / denom
        ys = (py[inside] - 0.5).astype(int)
        xs = (px[inside] - 0.5).astype(int)
        closer = np.isfinite(t) & (t > near) & (t < depth[ys, xs])
        depth[ys[closer], xs[closer]] = t[closer]
        face_id[ys[closer], xs[closer]] = fi

    ys, xs = np.nonzero(face_id >= 0)
    if len(ys) == 0:
        raise EmptySampleError("mesh is entirely outside the camera frustum")
    zc = depth[ys, xs]
    pc = np.stack([(xs + 0.5 - camera.cx) / f * zc, (ys + 0.5 - camera.cy) / f * zc, zc], axis=1)
    return camera.to_world(pc), face_id[ys, xs]


def annotate_gt(
    points: np.ndarray, model: BodyModel, posed_vertices: np.ndarray, posed_joints: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Part label of the nearest mesh vertex, and offset from point to that part's joint."""
    _, nn = cKDTree(posed_vertices).query(points)
    labels = np.asarray(model.vertex_part_labels)[nn]
    offsets = posed_joints[labels] - points
    return labels, offsets


def add_noise(points: np.ndarray, sigma: float, seed) -> np.ndarray:
    """Isotropic Gaussian jitter; a fixed seed gives the same directions for every sigma."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    return points + sigma * rng.standard_normal(points.shape)


def sample_indices(count: int, n: int, seed) -> np.ndarray:
    """Indices selecting exactly ``n`` of ``count`` items.

    Without replacement when ``count >= n``.  Otherwise every item appears
    once and the shortfall is drawn with replacement.  For a fixed seed
    smaller draws are prefixes of larger ones (when count >= n).
    """
    if count <= 0:
        raise ValueError("cannot sample from an empty point set")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(count)
    if count >= n:
        return perm[:n]
    return np.concatenate([perm, rng.integers(0, count, n - count)])


def sample_fixed(points: np.ndarray, n: int, seed, *annotations: np.ndarray):
    idx = sample_indices(len(points), n, seed)
    return (points[idx],) + tuple(a[idx] for a in annotations)


@dataclass
class TrainingSample:
    points: np.ndarray  # (N, 3) centered
    gt_part_labels: np.ndarray
    gt_offsets: np.ndarray
    gt_joints: np.ndarray
    gt_params: BodyParams
    gt_vertices: np.ndarray
    noise_sigma: float
    camera: Camera
    centroid: np.ndarray  # view-frame position of the sample origin
    raw_points: np.ndarray  # view frame (uncentered), pre-noise, every rendered pixel
    raw_labels: np.ndarray
    raw_offsets: np.ndarray
    raw_index: np.ndarray  # rendered point behind each entry of ``points``

    @property
    def num_points(self) -> int:
        return len(self.points)


def _from_index(raw_points, raw_labels, raw_offsets, frame_vertices, frame_joints, params, camera, idx, sigma, seed):
    noisy = add_noise(raw_points[idx], sigma, seed)
    centroid = noisy.mean(axis=0)
    gt_params = replace(params, translation=np.asarray(params.translation) - centroid)
    return TrainingSample(
        points=noisy - centroid,
        gt_part_labels=raw_labels[idx],
        gt_offsets=raw_offsets[idx],
        gt_joints=frame_joints - centroid,
        gt_params=gt_params,
        gt_vertices=frame_vertices - centroid,
        noise_sigma=float(sigma),
        camera=camera,
        centroid=centroid,
        raw_points=raw_points,
        raw_labels=raw_labels,
        raw_offsets=raw_offsets,
        raw_index=np.asarray(idx, dtype=np.int64),
    )


def _assemble(raw_points, raw_labels, raw_offsets, frame_vertices, frame_joints, params, camera, n, sigma, seed):
    seeds = np.random.SeedSequence(seed).spawn(2)
    idx = sample_indices(len(raw_points), n, seeds[0])
    return _from_index(raw_points, raw_labels, raw_offsets, frame_vertices, frame_joints, params, camera, idx, sigma, seeds[1])


def _frame(sample: TrainingSample):
    """The sample's raw arrays and ground truth in the (uncentered) view frame."""
    frame_params = replace(sample.gt_params, translation=sample.gt_params.translation + sample.centroid)
    return (sample.raw_points, sample.raw_labels, sample.raw_offsets, sample.gt_vertices + sample.centroid,
            sample.gt_joints + sample.centroid, frame_params, sample.camera)


def params_in_view(model: BodyModel, params: BodyParams, camera: Camera) -> BodyParams:
    """The same posed body with its root rotation and translation expressed in
    the camera's view frame."""
    Rv = camera.view_rotation()
    rest_root = posed_mesh(model, replace(params, translation=np.zeros(3)))[1][0]
    # the root joint pivots in place, so its posed position is rest_root + translation
    root_view = camera.to_view(rest_root + np.asarray(params.translation))
    return replace(params, root_rotation=Rv @ params.root_rotation, translation=root_view - rest_root)


def make_sample(
    model: BodyModel, params: BodyParams, camera: Camera, n: int = DEFAULT_POINTS, sigma: float = 0.0, seed=0
) -> TrainingSample:
    """Render, annotate and sample one view.  Everything in the returned sample
    lives in the camera's view frame (x right, y up, z toward the viewer),
    shifted so the sampled points have zero mean."""
    verts, _ = posed_mesh(model, params)
    raw, _ = render_partial(verts, model.faces, camera)
    vparams = params_in_view(model, params, camera)
    verts, joints = posed_mesh(model, vparams)
    raw = camera.to_view(raw)
    labels, offsets = annotate_gt(raw, model, verts, joints)
    return _assemble(raw, labels, offsets, verts, joints, vparams, camera, n, sigma, seed)


def derive_sample(sample: TrainingSample, n: int, sigma: float, seed) -> TrainingSample:
    """Re-draw ``n`` points with noise ``sigma`` from a sample's full rendering."""
    return _assemble(*_frame(sample), n, sigma, seed)


def renoise(sample: TrainingSample, sigma: float, seed) -> TrainingSample:
    """The sample's own points, with fresh noise ``sigma`` replacing its noise."""
    return _from_index(*_frame(sample), sample.raw_index, sigma, seed)


def _subset(sample: TrainingSample, idx: np.ndarray) -> TrainingSample:
    pts = sample.points[idx]
    shift = pts.mean(axis=0)
    return replace(
        sample,
        points=pts - shift,
        gt_part_labels=sample.gt_part_labels[idx],
        gt_offsets=sample.gt_offsets[idx],
        gt_joints=sample.gt_joints - shift,
        gt_params=replace(sample.gt_params, translation=np.asarray(sample.gt_params.translation) - shift),
        gt_vertices=sample.gt_vertices - shift,
        centroid=sample.centroid + shift,
        raw_index=sample.raw_index[idx],
    )


def resample_sample(sample: TrainingSample, n: int, seed) -> TrainingSample:
    """Resize a sample's (already noisy) cloud to ``n`` points the way inference
    does: a random subset, or every point plus repeats; then re-center.  For a
    fixed seed smaller subsets are contained in larger ones."""
    return _subset(sample, sample_indices(sample.num_points, n, seed))


def occlude_parts(sample: TrainingSample, parts) -> TrainingSample:
    """The sample without any of its points labeled with one of ``parts``
    (re-centered, noise kept)."""
    keep = np.nonzero(~np.isin(sample.gt_part_labels, np.asarray(list(parts))))[0]
    if not len(keep):
        raise EmptySampleError("occlusion removed every point")
    return _subset(sample, keep)


def centered_points(points: np.ndarray) -> np.ndarray:
    return points - points.mean(axis=0)


# ---------------------------------------------------------------- random scenes

def random_rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    return rodrigues(np.asarray(axis, float) / np.linalg.norm(axis) * angle)


def sample_params(model: BodyModel, rng: np.random.Generator, max_angle: float = 0.6, max_tilt: float = 0.3) -> BodyParams:
    """Random body: betas in [-2, 2], per-joint axis-angle up to ``max_angle`` rad,
    root yaw anywhere plus a tilt up to ``max_tilt`` rad."""
    K = model.num_joints
    betas = rng.uniform(-2.0, 2.0, model.num_betas)
    axes = rng.standard_normal((K - 1, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    local = rodrigues(axes * rng.uniform(0.0, max_angle, (K - 1, 1)))
    yaw = rodrigues(np.array([0.0, rng.uniform(-np.pi, np.pi), 0.0]))
    tilt_axis = np.array([np.cos(a := rng.uniform(0, 2 * np.pi)), 0.0, np.sin(a)])
    tilt = rodrigues(tilt_axis * rng.uniform(0.0, max_tilt))
    return BodyParams(betas=betas, root_rotation=tilt @ yaw, local_rotations=local, translation=np.zeros(3))


def ring_cameras(
    target: np.ndarray,
    count: int,
    rng: np.random.Generator,
    distance: float = 3.0,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    focal: float | None = None,
) -> list[Camera]:
    """``count`` cameras evenly spaced in azimuth around ``target`` with a random phase."""
    phase = rng.uniform(0, 2 * np.pi)
    W, H = resolution
    focal = focal if focal is not None else 1.25 * H
    cams = []
    for j in range(count):
        az = phase + 2 * np.pi * j / count
        el = rng.uniform(-0.1, 0.3)
        d = distance * rng.uniform(0.9, 1.1)
        offset = d * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(Camera(position=target + offset, target=np.array(target, float), width=W, height=H, focal=focal))
    return cams


@dataclass
class GenerateConfig:
    num_samples: int = 64
    points: int = DEFAULT_POINTS
    noise_sigma: float = TRAIN_NOISE_SIGMA
    cameras: int = 1
    seed: int = 0
    resolution: tuple[int, int] = DEFAULT_RESOLUTION


def _one_pose(args):
    model, cfg, pose_seed, views = args
    rng = np.random.default_rng(pose_seed)
    while True:
        params = sample_params(model, rng)
        verts, _ = posed_mesh(model, params)
        cams = ring_cameras(verts.mean(axis=0), cfg.cameras, rng, resolution=cfg.resolution)
        out = []
        try:
            for cam in cams[:views]:
                out.append(make_sample(model, params, cam, cfg.points, cfg.noise_sigma, rng.integers(2**63)))
        except EmptySampleError:
            continue
        return out


def generate_dataset(model: BodyModel, cfg: GenerateConfig, workers: int | None = None) -> list[TrainingSample]:
    """Deterministic in ``cfg.seed`` regardless of ``workers``."""
    n_poses = -(-cfg.num_samples // cfg.cameras)
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_poses)
    jobs = []
    remaining = cfg.num_samples
    for s in seeds:
        jobs.append((model, cfg, s, min(cfg.cameras, remaining)))
        remaining -= cfg.cameras
    workers = workers or int(os.environ.get("PCMESH_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            groups = list(pool.map(_one_pose, jobs))
    else:
        groups = [_one_pose(j) for j in jobs]
    return [s for g in groups for s in g]


# ---------------------------------------------------------------- shards

SHARD_VERSION = 2
_SAMPLE_ARRAYS = (
    "points",
    "gt_part_labels",
    "gt_offsets",
    "gt_joints",
    "gt_vertices",
    "centroid",
    "raw_points",
    "raw_labels",
    "raw_offsets",
    "raw_index",
)


def save_shard(path: str | os.PathLike, samples: list[TrainingSample]) -> None:
    if not samples:
        raise ValueError("refusing to write an empty shard")
    s0 = samples[0]
    entries: dict[str, np.ndarray] = {
        "manifest": np.array(
            [SHARD_VERSION, len(samples), s0.num_points, len(s0.gt_joints), len(s0.gt_vertices), len(s0.gt_params.betas)],
            dtype=np.float64,
        )
    }
    for i, s in enumerate(samples):
        pre = f"sample/{i:06d}/"
        for name in _SAMPLE_ARRAYS:
            entries[pre + name] = getattr(s, name)
        entries[pre + "betas"] = s.gt_params.betas
        entries[pre + "rotations"] = s.gt_params.rotations()
        entries[pre + "translation"] = s.gt_params.translation
        entries[pre + "noise_sigma"] = np.array([s.noise_sigma])
        entries[pre + "camera"] = s.camera.as_vector()
    save_archive(path, entries)


def read_manifest(entries: dict) -> dict:
    m = entries["manifest"].astype(np.int64)
    return dict(version=int(m[0]), num_samples=int(m[1]), points=int(m[2]), joints=int(m[3]), vertices=int(m[4]), betas=int(m[5]))


def load_shard(path: str | os.PathLike) -> list[TrainingSample]:
    entries = load_archive(path)
    if "manifest" not in entries:
        raise ValueError(f"{path}: not a dataset shard (no manifest)")
    man = read_manifest(entries)
    if man["version"] != SHARD_VERSION:
        raise ValueError(f"{path}: shard version {man['version']}, expected {SHARD_VERSION}")
    out = []
    for i in range(man["num_samples"]):
        pre = f"sample/{i:06d}/"
        arr = {name: np.asarray(entries[pre + name], dtype=np.float64) for name in _SAMPLE_ARRAYS}
        rots = np.asarray(entries[pre + "rotations"], dtype=np.float64)
        params = BodyParams(
            betas=np.asarray(entries[pre + "betas"], dtype=np.float64),
            root_rotation=rots[0],
            local_rotations=rots[1:],
            translation=np.asarray(entries[pre + "translation"], dtype=np.float64),
        )
        out.append(
            TrainingSample(
                points=arr["points"],
                gt_part_labels=arr["gt_part_labels"].astype(np.int64),
                gt_offsets=arr["gt_offsets"],
                gt_joints=arr["gt_joints"],
                gt_params=params,
                gt_vertices=arr["gt_vertices"],
                noise_sigma=float(entries[pre + "noise_sigma"][0]),
                camera=Camera.from_vector(entries[pre + "camera"]),
                centroid=arr["centroid"],
                raw_points=arr["raw_points"],
                raw_labels=arr["raw_labels"].astype(np.int64),
                raw_offsets=arr["raw_offsets"],
                raw_index=arr["raw_index"].astype(np.int64),
            )
        )
    return out
