"""Central finite-difference checks of the reverse-mode gradients.

Every check runs in float64.  A check passes when

    |analytic - numeric| <= rtol * max(|analytic|, |numeric|, atol / rtol)

holds for every compared quantity; the ``atol`` floor only matters for
near-zero derivatives, where the difference quotient's round-off dominates.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

RTOL = 1e-3
ATOL = 1e-7
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    trials: int
    compared: int
    max_rel_err: float
    passed: bool

    def line(self) -> str:
        return (
            f"check={self.name} trials={self.trials} compared={self.compared} "
            f"max_rel_err={self.max_rel_err:.3e} status={'pass' if self.passed else 'FAIL'}"
        )


def rel_err(a: np.ndarray, n: np.ndarray, atol: float = ATOL) -> np.ndarray:
    """Elementwise relative error; a value <= RTOL passes."""
    a, n = np.asarray(a, float), np.asarray(n, float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / RTOL)
    return np.abs(a - n) / scale


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * step)
    return g


def check_function(fn: Callable[..., T.Tensor], inputs: list[np.ndarray], rng: np.random.Generator) -> tuple[float, int]:
    """Compare gradients of ``sum(fn(*inputs) * R)`` for a random fixed ``R``."""
    leaves = [T.Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    out = fn(*leaves)
    R = rng.standard_normal(out.shape)

    def scalar() -> float:
        return float(np.sum(fn(*[T.Tensor(l.data, dtype=np.float64) for l in leaves]).data * R))

    loss = T.sum(T.mul(out, R))
    grads = T.grad(loss, {str(i): l for i, l in enumerate(leaves)})
    worst, count = 0.0, 0
    for i, leaf in enumerate(leaves):
        num = numeric_grad(scalar, leaf.data)
        worst = max(worst, float(np.max(rel_err(grads[str(i)], num), initial=0.0)))
        count += num.size
    return worst, count


def _away_from(x: np.ndarray, points=(0.0,), margin: float = 1e-2) -> np.ndarray:
    """Nudge entries off non-differentiable points."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.sign(x - p + 1e-30) * margin * 2, x)
    return x


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    n, m, k = (int(v) for v in rng.integers(2, 5, 3))
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    idx = rng.integers(0, n, 5)
    scatter_idx = rng.integers(0, n, (m, 3))
    scatter_w = rng.uniform(0, 1, (m, 3))
    return {
        "add": (T.add, [r(n, m), r(m)]),
        "sub": (T.sub, [r(n, m), r(n, 1)]),
        "mul": (T.mul, [r(n, m), r(n, m)]),
        "div": (T.div, [r(n, m), pos(n, m)]),
        "relu": (T.relu, [_away_from(r(n, m))]),
        "exp": (T.exp, [r(n, m)]),
        "log": (T.log, [pos(n, m)]),
        "absolute": (T.absolute, [_away_from(r(n, m))]),
        "clamp_min": (lambda x: T.clamp_min(x, 0.1), [_away_from(r(n, m), (0.1,))]),
        "smooth_l1": (T.smooth_l1, [_away_from(2 * r(n, m), (-1.0, 1.0))]),
        "matmul": (T.matmul, [r(n, m), r(m, k)]),
        "matmul_batched": (T.matmul, [r(2, n, m), r(2, m, k)]),
        "reshape": (lambda x: T.reshape(x, (m, n)), [r(n, m)]),
        "transpose": (lambda x: T.transpose(x, (2, 0, 1)), [r(n, m, k)]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [r(n, m), r(n, k)]),
        "index": (lambda x: T.index(x, (idx, slice(None))), [r(n, m)]),
        "gather_rows": (lambda x: T.gather_rows(x, idx), [r(n, m)]),
        "scatter_weighted_sum": (lambda x: T.scatter_weighted_sum(x, scatter_idx, scatter_w), [r(n, k)]),
        "sum": (lambda x: T.sum(x, axis=1), [r(n, m)]),
        "mean": (lambda x: T.mean(x, axis=0, keepdims=True), [r(n, m)]),
        "max": (lambda x: T.max(x, axis=0), [r(n, m)]),
        "min": (lambda x: T.min(x, axis=1), [r(n, m)]),
        "softmax": (lambda x: T.softmax(x, axis=1), [r(n, m)]),
        "l1_norm": (T.l1_norm, [_away_from(r(n, m))]),
        "l2_norm": (lambda x: T.l2_norm(x, axis=1), [r(n, 3)]),
        "frobenius_norm": (T.frobenius_norm, [r(n, 3, 3)]),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0)))


def run_op_checks(trials: int = 100, seed: int = 0, names=None) -> list[CheckResult]:
    """``trials`` random instances of every primitive operation."""
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in (names or OP_NAMES)}
    counts = dict.fromkeys(worst, 0)
    for _ in range(trials):
        cases = _op_cases(rng)
        for name in worst:
            fn, inputs = cases[name]
            err, c = check_function(fn, inputs, rng)
            worst[name] = max(worst[name], err)
            counts[name] += c
    return [CheckResult(n, trials, counts[n], worst[n], worst[n] <= RTOL) for n in worst]


# ---------------------------------------------------------------- full pipeline

def _line_derivative(f: Callable[[float], float], step: float, retries: int = 2) -> float:
    """Central difference of ``f`` at 0.

    ReLUs and max-pools make the loss piecewise smooth.  When a kink lies
    within ``step`` the forward and backward one-sided slopes disagree by far
    more than curvature allows; the step is then shrunk tenfold and retried.
    """
    f0 = f(0.0)
    for attempt in range(retries + 1):
        hi, lo = f(step), f(-step)
        if attempt == retries or rel_err((hi - f0) / step, (f0 - lo) / step) <= RTOL:
            return (hi - lo) / (2 * step)
        step /= 10


def _directional(loss_of: Callable[[], float], param: T.Tensor, analytic: np.ndarray, rng, step: float) -> tuple[float, float]:
    v = rng.standard_normal(param.shape)
    v /= np.linalg.norm(v)
    base = param.data.copy()

    def f(t: float) -> float:
        param.data = base + t * v
        return loss_of()

    numeric = _line_derivative(f, step)
    param.data = base
    return float(np.sum(analytic * v)), numeric


def run_pipeline_check(
    seed: int = 0,
    num_joints: int = 16,
    num_vertices: int = 400,
    points: int = 512,
    coordinates: int = 64,
    step: float = STEP,
) -> list[CheckResult]:
    """Total training loss of the whole network on one toy sample, in float64.

    Two comparisons: a random-direction derivative for every parameter
    tensor, and single-coordinate differences for ``coordinates`` randomly
    chosen weights.  The grouping plan (FPS, ball query, interpolation
    neighbours) is held fixed, as it is a function of the input points only.
    """
    from .body import make_toy_model
    from .losses import LossWeights, total_loss
    from .model import MeshRecoveryNet
    from .synth import GenerateConfig, generate_dataset

    rng = np.random.default_rng(seed)
    body = make_toy_model(num_joints, num_vertices)
    sample = generate_dataset(body, GenerateConfig(num_samples=1, points=points, noise_sigma=0.005, seed=seed))[0]
    net = MeshRecoveryNet(body, seed=seed).astype(np.float64)
    plan = net.plan(sample.points)
    w = LossWeights()

    def loss_of() -> float:
        return float(total_loss(net(sample.points, plan), sample, w)[0].data)

    params = net.parameters()
    loss, _ = total_loss(net(sample.points, plan), sample, w)
    grads = T.grad(loss, params)

    dir_err = 0.0
    for name, p in params.items():
        a, n = _directional(loss_of, p, grads[name], rng, step)
        dir_err = max(dir_err, float(rel_err(a, n)))

    names = list(params)
    coord_err = 0.0
    for _ in range(coordinates):
        name = names[rng.integers(len(names))]
        p = params[name]
        j = int(rng.integers(p.data.size))
        flat = p.data.reshape(-1)
        old = flat[j]

        def f(t: float) -> float:
            flat[j] = old + t
            return loss_of()

        numeric = _line_derivative(f, step)
        flat[j] = old
        coord_err = max(coord_err, float(rel_err(grads[name].reshape(-1)[j], numeric)))
    return [
        CheckResult("pipeline_directional", 1, len(params), dir_err, dir_err <= RTOL),
        CheckResult("pipeline_coordinates", 1, coordinates, coord_err, coord_err <= RTOL),
    ]


def run_all(trials: int = 100, seed: int = 0) -> list[CheckResult]:
    return run_op_checks(trials, seed) + run_pipeline_check(seed)
