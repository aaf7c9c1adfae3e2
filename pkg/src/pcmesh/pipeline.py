"""Training, evaluation and single-cloud inference, plus checkpoint I/O."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .archive import load_archive, save_archive
from .body import BodyModel, eval_subset_vertices, load_body_model, make_toy_model
from .losses import LossWeights, format_metrics, mesh_metrics, total_loss
from .meshio import read_points, write_mesh, write_points
from .model import MeshRecoveryNet, Prediction, predict
from .synth import TrainingSample, derive_sample, load_shard, renoise, resample_sample, sample_indices

log = logging.getLogger(__name__)

MIN_POINTS = 128
THREADS_ENV = "PCMESH_THREADS"


class PipelineError(RuntimeError):
    """Failure with machine-readable ``key=value`` details."""

    def __init__(self, kind: str, message: str, **details):
        super().__init__(message)
        self.kind = kind
        self.details = details

    def diagnostic(self) -> str:
        extra = " ".join(f"{k}={v}" for k, v in self.details.items())
        return f"status=error kind={self.kind} message={json.dumps(str(self))}" + (f" {extra}" if extra else "")


class TrainingDiverged(PipelineError):
    def __init__(self, step: int, checkpoint: str | None):
        super().__init__("non_finite_loss", f"non-finite loss at step {step}", step=step, last_good=checkpoint)


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    seed: int = 0
    train_data: str = ""
    eval_data: str = ""
    out_dir: str = "runs/default"
    points: int = 2500
    noise_sigma: float = 0.010  # meters
    lr: float = 1e-4
    steps: int = 5000
    checkpoint_every: int = 1000
    log_every: int = 50
    grad_accum: int = 1
    body: str = "toy:16:400"  # "toy:K:M[:seed]" or a body-model asset path
    param_supervision: bool = True
    max_neighbors: int = 32
    resample: bool = False  # draw a fresh N-point subset of each rendering every step
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.points < MIN_POINTS:
            raise PipelineError("bad_config", f"points must be >= {MIN_POINTS}", points=self.points)
        paths = [p for p in (self.train_data, self.eval_data, self.out_dir) if p]
        if len({os.path.abspath(p) for p in paths}) != len(paths):
            raise PipelineError("bad_config", "dataset and output paths must be distinct")
        if self.steps < 0 or self.checkpoint_every < 1 or self.log_every < 1 or self.grad_accum < 1:
            raise PipelineError("bad_config", "steps >= 0, checkpoint_every/log_every/grad_accum >= 1 required")

    def effective_weights(self) -> LossWeights:
        return self.weights if self.param_supervision else replace(self.weights, smpl=0.0)

    def items(self) -> dict[str, object]:
        """Flat view: loss weights appear as ``weight.<name>``."""
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}
        flat.update({f"weight.{k}": v for k, v in asdict(self.weights).items()})
        return flat


def _coerce(current, text: str):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("1", "true", "yes", "on")
    return type(current)(text) if not isinstance(current, str) else text


def apply_overrides(cfg: RunConfig, pairs: dict[str, str | object]) -> RunConfig:
    """New config with ``key=value`` overrides applied (values may be strings)."""
    flat = cfg.items()
    top, wts = {}, asdict(cfg.weights)
    for key, value in pairs.items():
        key = key.replace("-", "_") if not key.startswith("weight.") else key
        if key not in flat:
            raise PipelineError("bad_config", f"unknown config key {key!r}", key=key)
        cur = flat[key]
        try:
            val = _coerce(cur, value) if isinstance(value, str) else type(cur)(value)
        except ValueError as exc:
            raise PipelineError("bad_config", f"{key}: {exc}", key=key) from None
        if key.startswith("weight."):
            wts[key[len("weight.") :]] = float(val)
        else:
            top[key] = val
    return replace(cfg, weights=LossWeights(**wts), **top)


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise PipelineError("bad_config", f"{path}:{lineno}: expected key=value", line=lineno)
            k, v = text.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then explicit overrides (CLI flags)."""
    pairs = read_config_file(path) if path else {}
    pairs.update(overrides or {})
    return apply_overrides(RunConfig(), pairs)


def config_line(cfg: RunConfig) -> str:
    w = cfg.effective_weights()
    tags = {k: v for k, v in cfg.items().items() if not k.startswith("weight.")}
    tags.update({f"weight.{k}": v for k, v in asdict(w).items()})
    return "config " + " ".join(f"{k}={v}" for k, v in tags.items())


# ---------------------------------------------------------------- body models

def resolve_body(spec: str) -> BodyModel:
    if spec.startswith("toy"):
        parts = spec.split(":")[1:]
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            raise PipelineError("bad_config", f"bad toy body spec {spec!r}") from None
        return make_toy_model(*nums)
    if not os.path.exists(spec):
        raise PipelineError("missing_file", f"body-model asset {spec!r} not found", path=spec)
    return load_body_model(spec)


# ---------------------------------------------------------------- checkpoints

def storable_body(body: BodyModel) -> BodyModel:
    """``body`` with every float array rounded to float32 precision (weight
    rows still sum to 1 within ~1e-7), i.e. exactly what a checkpoint holds."""
    f32 = lambda a: np.asarray(a, np.float32).astype(np.float64)  # noqa: E731
    return replace(
        body,
        template_vertices=f32(body.template_vertices),
        shape_basis=f32(body.shape_basis),
        joint_regressor=f32(body.joint_regressor),
        skinning_weights=f32(body.skinning_weights),
    )


_BODY_PREFIX = "body/"
_META_PREFIX = "meta/"
_BODY_FIELDS = (
    "template_vertices",
    "shape_basis",
    "joint_regressor",
    "skinning_weights",
    "parents",
    "vertex_part_labels",
    "faces",
    "eval_subset",
)


def save_checkpoint(
    path: str | os.PathLike, net: MeshRecoveryNet, opt: T.Adam | None = None, step: int = 0, points: int = 2500
) -> None:
    """Parameters, optimizer moments, the body model and the network dims in one archive.

    Everything is stored in float32.  Training runs on
    :func:`storable_body` of its body model so a reloaded network is
    bit-identical to the one that was saved.
    """
    entries: dict[str, np.ndarray] = dict(net.state_dict())
    if opt is not None:
        entries.update(opt.state_dict())
    for name in _BODY_FIELDS:
        entries[_BODY_PREFIX + name] = getattr(net.body, name)
    entries[_META_PREFIX + "dims"] = np.array(
        [net.body.num_joints, net.body.num_vertices, net.body.num_betas, net.backbone.max_neighbors, points], float
    )
    entries[_META_PREFIX + "step"] = np.array([step], float)
    entries[_META_PREFIX + "threshold"] = np.array([net.threshold], float)
    save_archive(path, entries)


@dataclass
class Checkpoint:
    net: MeshRecoveryNet
    step: int
    points: int
    optimizer_state: dict[str, np.ndarray]


def load_checkpoint(path: str | os.PathLike, expect_body: BodyModel | None = None) -> Checkpoint:
    if not os.path.exists(path):
        raise PipelineError("missing_file", f"checkpoint {os.fspath(path)!r} not found", path=path)
    entries = load_archive(path)
    try:
        dims = entries[_META_PREFIX + "dims"].astype(np.int64)
        raw = {name: np.asarray(entries[_BODY_PREFIX + name], np.float64) for name in _BODY_FIELDS}
    except KeyError as exc:
        raise PipelineError("bad_checkpoint", f"{path}: missing entry {exc}") from None
    K, M, S, nb, points = (int(x) for x in dims)
    if expect_body is not None and (expect_body.num_joints, expect_body.num_vertices, expect_body.num_betas) != (K, M, S):
        raise PipelineError(
            "dim_mismatch",
            "checkpoint body dimensions differ from the configured body model",
            expected=f"{expect_body.num_joints}x{expect_body.num_vertices}x{expect_body.num_betas}",
            found=f"{K}x{M}x{S}",
        )
    body = BodyModel(
        template_vertices=raw["template_vertices"],
        shape_basis=raw["shape_basis"],
        joint_regressor=raw["joint_regressor"],
        skinning_weights=raw["skinning_weights"],
        parents=raw["parents"].astype(np.int64),
        vertex_part_labels=raw["vertex_part_labels"].astype(np.int64),
        faces=raw["faces"].astype(np.int64),
        eval_subset=raw["eval_subset"].astype(np.int64),
    )
    threshold = float(entries.get(_META_PREFIX + "threshold", np.array([0.1]))[0])
    net = MeshRecoveryNet(body, max_neighbors=nb, threshold=threshold)
    try:
        net.load_state_dict(entries)
    except (KeyError, T.ShapeError) as exc:
        raise PipelineError("dim_mismatch", f"{path}: {exc}") from None
    opt_state = {k: v for k, v in entries.items() if "::adam" in k}
    return Checkpoint(net, int(entries[_META_PREFIX + "step"][0]), points, opt_state)


# ---------------------------------------------------------------- datasets

def load_dataset(path: str, body: BodyModel | None = None) -> list[TrainingSample]:
    if not path or not os.path.exists(path):
        raise PipelineError("missing_file", f"dataset {path!r} not found", path=path)
    samples = load_shard(path)
    if body is not None:
        s = samples[0]
        found = (len(s.gt_joints), len(s.gt_vertices))
        if found != (body.num_joints, body.num_vertices):
            raise PipelineError(
                "dim_mismatch",
                "dataset dimensions differ from the body model",
                expected=f"{body.num_joints}x{body.num_vertices}",
                found=f"{found[0]}x{found[1]}",
            )
    return samples


def resize_samples(samples: list[TrainingSample], n: int, seed: int) -> list[TrainingSample]:
    """Redraw samples whose point count differs from ``n`` (keeping their noise level)."""
    return [
        s if s.num_points == n else derive_sample(s, n, s.noise_sigma, [seed, i]) for i, s in enumerate(samples)
    ]


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    net: MeshRecoveryNet
    log_lines: list[str]
    checkpoint: str | None
    history: list[dict[str, float]]


def _sample_order(count: int, seed: int):
    """Endless sequence of sample indices: a fresh permutation per epoch."""
    rng = np.random.default_rng([seed, 1])
    while True:
        yield from (int(i) for i in rng.permutation(count))


def train(
    cfg: RunConfig,
    samples: list[TrainingSample] | None = None,
    body: BodyModel | None = None,
    log_path: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
) -> TrainResult:
    """Adam on the total loss, one sample per forward pass.

    ``samples`` defaults to ``cfg.train_data``.  Every ``log_every`` steps a
    ``step=... total=... <component>=...`` line is emitted, holding each loss
    component averaged over the steps since the previous line; checkpoints go to
    ``<out_dir>/last.vhmr`` every ``checkpoint_every`` steps and at the end.
    A non-finite loss raises :class:`TrainingDiverged` without touching the
    last good checkpoint.
    """
    body = storable_body(body or resolve_body(cfg.body))
    if samples is None:
        samples = load_dataset(cfg.train_data, body)
    samples = resize_samples(samples, cfg.points, cfg.seed)
    weights = cfg.effective_weights()

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "last.vhmr"
    log_path = Path(log_path) if log_path is not None else out_dir / "train.log"

    start = 0
    if resume is not None:
        ck = load_checkpoint(resume, body)
        net, start = ck.net, ck.step
        opt = T.Adam(net.parameters(), lr=cfg.lr)
        opt.load_state_dict(ck.optimizer_state)
    else:
        net = MeshRecoveryNet(body, seed=cfg.seed, max_neighbors=cfg.max_neighbors)
        opt = T.Adam(net.parameters(), lr=cfg.lr)
    params = net.parameters()

    lines = [config_line(cfg)]
    plans: dict[int, object] = {}
    order = _sample_order(len(samples), cfg.seed)
    draw = start * cfg.grad_accum
    for _ in range(draw):  # a resumed run continues the same sequence
        next(order)
    history: list[dict[str, float]] = []
    window: list[dict[str, float]] = []
    last_good: str | None = str(ckpt_path) if ckpt_path.exists() else None

    with open(log_path, "a" if resume else "w") as fh:
        fh.write(lines[0] + "\n")
        for step in range(start + 1, cfg.steps + 1):
            acc: dict[str, np.ndarray] | None = None
            parts_sum: dict[str, float] = {}
            for _ in range(cfg.grad_accum):
                i = next(order)
                if cfg.resample:
                    s = derive_sample(samples[i], cfg.points, samples[i].noise_sigma, [cfg.seed, 2, draw])
                    plan = net.plan(s.points)
                else:
                    s = samples[i]
                    plan = plans[i] if i in plans else plans.setdefault(i, net.plan(s.points))
                draw += 1
                out = net(s.points, plan)
                loss, parts = total_loss(out, s, weights)
                if not np.isfinite(parts["total"]):
                    fh.write(f"step={step} status=diverged\n")
                    raise TrainingDiverged(step, last_good)
                g = T.grad(loss, params)
                acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
                for k, v in parts.items():
                    parts_sum[k] = parts_sum.get(k, 0.0) + v / cfg.grad_accum
            if cfg.grad_accum > 1:
                acc = {k: v / cfg.grad_accum for k, v in acc.items()}
            if not opt.step(acc):
                fh.write(f"step={step} status=diverged\n")
                raise TrainingDiverged(step, last_good)
            history.append(parts_sum)
            window.append(parts_sum)
            if step % cfg.log_every == 0 or step == cfg.steps:
                means = {k: float(np.mean([h[k] for h in window])) for k in sorted(parts_sum)}
                window = []
                line = format_metrics(means, step=step)
                lines.append(line)
                fh.write(line + "\n")
                fh.flush()
                log.info(line)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                save_checkpoint(ckpt_path, net, opt, step, cfg.points)
                last_good = str(ckpt_path)
    return TrainResult(net, lines, last_good, history)


# ---------------------------------------------------------------- evaluation

def _orth_error(raw_rotations: np.ndarray) -> float:
    gram = raw_rotations @ np.swapaxes(raw_rotations, 1, 2)
    return float(np.mean(np.linalg.norm(gram - np.eye(3), axis=(1, 2))))


def sample_record(net: MeshRecoveryNet, sample: TrainingSample, pred: Prediction | None = None) -> dict[str, float]:
    """Metrics for one sample: PVE/PVE_max/MPJPE/CD (mm), segmentation accuracy,
    mean orthogonality error of the raw rotations."""
    pred = pred if pred is not None else predict(net, sample.points)
    body = net.body
    rec = mesh_metrics(
        eval_subset_vertices(body, pred.vertices),
        eval_subset_vertices(body, sample.gt_vertices),
        pred.joints,
        sample.gt_joints,
        points=sample.points,
        full_pred_vertices=pred.vertices,
    )
    rec["seg_acc"] = float(np.mean(pred.part_labels == sample.gt_part_labels))
    rec["orth"] = _orth_error(pred.raw_rotations)
    return rec


def aggregate(records: list[dict[str, float]]) -> dict[str, float]:
    """Dataset-level row: means of every field except PVE_max, which is the max."""
    keys = records[0].keys()
    return {k: float(np.max([r[k] for r in records])) if k == "PVE_max" else float(np.mean([r[k] for r in records])) for k in keys}


def _eval_chunk(args):
    net, samples = args
    return [sample_record(net, s) for s in samples]


def evaluate_samples(net: MeshRecoveryNet, samples: list[TrainingSample], workers: int | None = None) -> list[dict]:
    """Per-sample records, in sample order regardless of ``workers``."""
    workers = workers or int(os.environ.get(THREADS_ENV, "1"))
    if workers <= 1 or len(samples) < 2:
        return [sample_record(net, s) for s in samples]
    chunks = [samples[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_eval_chunk, [(net, c) for c in chunks]))
    out: list[dict] = [None] * len(samples)  # type: ignore[list-item]
    for w, recs in enumerate(parts):
        for j, r in enumerate(recs):
            out[w + j * workers] = r
    return out


@dataclass
class EvalRow:
    tags: dict[str, object]
    metrics: dict[str, float]
    records: list[dict[str, float]]

    def line(self) -> str:
        return format_metrics(self.metrics, **self.tags)


def _to_input(samples: list[TrainingSample], n: int | None, seed: int) -> list[TrainingSample]:
    if n is None:
        return samples
    return [s if s.num_points == n else resample_sample(s, n, [seed, i, 1]) for i, s in enumerate(samples)]


def evaluate(
    net: MeshRecoveryNet,
    samples: list[TrainingSample],
    noise_sigmas_mm: list[float] | None = None,
    point_counts: list[int] | None = None,
    seed: int = 0,
    workers: int | None = None,
    input_points: int | None = None,
) -> list[EvalRow]:
    """Metric rows for a test set.

    Without sweeps, one row on the samples as stored.  Sweeps perturb every
    sample's own points so only the swept quantity changes between rows: a
    noise sweep replaces the stored noise with each level (same directions,
    scaled); a point sweep keeps nested subsets of the stored points (a count
    above the stored one re-draws from the full rendering).

    With ``input_points`` (the network's training N) each swept cloud reaches
    the network as it would through :func:`infer`: a capture of at least N
    points is seen as N of them, so every such row uses the stored N-point
    cloud; a smaller capture is padded by repetition.
    """
    rows = []
    if not noise_sigmas_mm and not point_counts:
        recs = evaluate_samples(net, samples, workers)
        rows.append(EvalRow({"sweep": "none", "samples": len(samples)}, aggregate(recs), recs))
    for sigma_mm in noise_sigmas_mm or []:
        sweep = [renoise(s, sigma_mm / 1000.0, [seed, i]) for i, s in enumerate(samples)]
        recs = evaluate_samples(net, _to_input(sweep, input_points, seed), workers)
        rows.append(EvalRow({"sweep": "noise", "noise_mm": sigma_mm}, aggregate(recs), recs))
    for count in point_counts or []:
        if count < MIN_POINTS:
            raise PipelineError("bad_config", f"point count must be >= {MIN_POINTS}", points=count)
        sweep = []
        for i, s in enumerate(samples):
            if input_points is not None and count >= input_points:
                sweep.append(s)
            elif count <= s.num_points:
                sweep.append(resample_sample(s, count, [seed, i]))
            else:
                sweep.append(derive_sample(s, count, s.noise_sigma, [seed, i]))
        recs = evaluate_samples(net, _to_input(sweep, input_points, seed), workers)
        rows.append(EvalRow({"sweep": "points", "points": count}, aggregate(recs), recs))
    return rows


# ---------------------------------------------------------------- inference

@dataclass
class InferResult:
    prediction: Prediction
    centroid: np.ndarray
    points: np.ndarray  # resampled, world frame
    files: dict[str, str]


def infer_points(net: MeshRecoveryNet, points: np.ndarray, n: int, seed: int = 0) -> tuple[Prediction, np.ndarray, np.ndarray]:
    """Center, resample to ``n`` and predict.  Returns (prediction in the centered
    frame, centroid, the centered resampled points)."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or not np.all(np.isfinite(points)):
        raise PipelineError("bad_input", "points must be a finite (n, 3) array")
    chosen = points[sample_indices(len(points), n, seed)]
    centroid = chosen.mean(axis=0)
    centered = chosen - centroid
    return predict(net, centered), centroid, centered


def infer(
    checkpoint: str | os.PathLike,
    cloud_path: str | os.PathLike,
    out_dir: str | os.PathLike,
    mesh_format: str = "obj",
    seed: int = 0,
    points: int | None = None,
) -> InferResult:
    ck = load_checkpoint(checkpoint)
    pts = read_points(cloud_path)
    n = points or ck.points
    pred, centroid, centered = infer_points(ck.net, pts, n, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "mesh": str(out / f"mesh.{mesh_format}"),
        "params": str(out / "params.json"),
        "labels": str(out / "labels.txt"),
        "joints": str(out / "joints.txt"),
    }
    write_mesh(files["mesh"], pred.vertices + centroid, ck.net.body.faces)
    record = {
        "betas": pred.params.betas.tolist(),
        "root_rotation": pred.params.root_rotation.tolist(),
        "local_rotations": pred.params.local_rotations.tolist(),
        "translation": (pred.params.translation + centroid).tolist(),
        "rotation_ok": pred.rotation_ok.tolist(),
        "visible_joints": pred.visible.tolist(),
        "points": int(n),
        "seed": int(seed),
    }
    with open(files["params"], "w") as fh:
        json.dump(record, fh, indent=1)
    # per point: x y z, predicted part label, voted joint position
    write_points(files["labels"], centered + centroid, np.column_stack([pred.part_labels, pred.voted_positions + centroid]))
    write_points(
        files["joints"],
        pred.joint_positions + centroid * pred.visible[:, None],
        np.column_stack([pred.completed_positions + centroid, pred.joints + centroid, pred.visible]),
    )
    return InferResult(pred, centroid, centered + centroid, files)
