"""Dense tensors with reverse-mode differentiation.

Every op returns a fresh :class:`Tensor`; the graph is implicit in the
``_parents`` links and is walked in reverse topological order by
:func:`backward`.  Elementwise ops follow numpy broadcasting; gradients are
summed back to the operand shapes.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes do not conform to the op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible extents {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _const_like(b, a)
    if isinstance(b, Tensor):
        return _const_like(a, b), b
    return as_tensor(a), as_tensor(b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def absolute(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    mask = x.data >= lo
    out = np.where(mask, x.data, np.asarray(lo, dtype=x.dtype))
    return _make(out, (x,), lambda g: (g * mask,), "clamp_min")


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 / beta inside |x| < beta, |x| - beta/2 outside."""
    ax = np.abs(x.data)
    quad = ax < beta
    out = np.where(quad, 0.5 * x.data * x.data / beta, ax - 0.5 * beta).astype(x.dtype)

    def bw(g):
        return (g * np.where(quad, x.data / beta, np.sign(x.data)),)

    return _make(out, (x,), bw, "smooth_l1")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible extents {a.shape} and {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != ax
        ):
            raise ShapeError(f"concat: incompatible extents {ref.shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def index(x: Tensor, key) -> Tensor:
    """Static numpy indexing; covers row gathers and slices."""
    out = x.data[key]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "index")


def gather_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: indices out of range for {x.shape[0]} rows")
    flat = idx.reshape(-1)
    out = x.data[flat].reshape(idx.shape + x.shape[1:])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, flat, g.reshape((flat.size,) + x.shape[1:]))
        return (full,)

    return _make(out, (x,), bw, "gather_rows")


def scatter_weighted_sum(x: Tensor, idx, weights) -> Tensor:
    """out[i] = sum_j weights[i, j] * x[idx[i, j]] with constant idx and weights.

    The backward pass scatters ``weights[i, j] * g[i]`` into row ``idx[i, j]``.
    """
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=x.dtype)
    if idx.shape != w.shape or idx.ndim != 2:
        raise ShapeError(f"scatter_weighted_sum: idx {idx.shape} vs weights {w.shape}")
    out = np.einsum("ij,ijf->if", w, x.data[idx])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx.reshape(-1), (w[:, :, None] * g[:, None, :]).reshape(-1, x.shape[1]))
        return (full,)

    return _make(out, (x,), bw, "scatter_weighted_sum")


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / float(count))


def max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Reduce-max along ``axis``; the subgradient goes to the first maximal element."""
    arg = np.argmax(x.data, axis=axis)
    argk = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, argk, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g):
        full = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, argk, gk, axis=axis)
        return (full,)

    return _make(out, (x,), bw, "max")


def min(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    return mul(max(mul(x, -1.0), axis, keepdims), -1.0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def l1_norm(x: Tensor, axis=None) -> Tensor:
    return sum(absolute(x), axis=axis)


def l2_norm(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    out = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, gk * x.data / safe, 0).astype(x.dtype),)

    res = out if keepdims else np.squeeze(out, axis=axis)
    return _make(res, (x,), bw, "l2_norm")


def frobenius_norm(x: Tensor) -> Tensor:
    """Frobenius norm over the last two axes (one value per matrix)."""
    if x.ndim < 2:
        raise ShapeError(f"frobenius_norm: need a matrix, got {x.shape}")
    lead = x.shape[:-2]
    flat = reshape(x, lead + (x.shape[-2] * x.shape[-1],))
    return l2_norm(flat, axis=-1)


# ---------------------------------------------------------------- graph traversal

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)


def grad(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of ``loss`` w.r.t. each named parameter (zeros where unreachable)."""
    for p in params.values():
        p.grad = None
    backward(loss)
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


# ---------------------------------------------------------------- parameters

class Module:
    """Container of named trainable tensors, discovered through attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        for p in self.parameters().values():
            return p.dtype
        return DEFAULT_DTYPE

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = [k for k in params if k not in state]
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected {p.shape}, found {arr.shape}")
            p.data = arr.astype(p.dtype)


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


class Linear(Module):
    """Affine map applied along the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float | None = None):
        std = np.sqrt(2.0 / n_in) if scale is None else scale
        self.weight = parameter(rng.standard_normal((n_in, n_out)) * std)
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: input {x.shape} vs weight {self.weight.shape}")
        flat = x if x.ndim == 2 else reshape(x, (-1, x.shape[-1]))
        out = add(matmul(flat, self.weight), self.bias)
        return out if x.ndim == 2 else reshape(out, lead + (self.weight.shape[1],))


class MLP(Module):
    """Stack of Linear layers with relu between them (and after the last if ``final_relu``)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, final_relu: bool = True):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.final_relu = final_relu

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = relu(x)
        return x


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with bias correction; moments live alongside the parameters by name."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        for p in self.params.values():  # updates are applied in place
            p.data = np.array(p.data, copy=True)

    def step(self, grads: Mapping[str, np.ndarray]) -> bool:
        """Apply one update.  Returns False (and leaves state untouched) on non-finite input."""
        # a float64 sum propagates any nan/inf and cannot overflow for float32 input
        bad = [k for k, g in grads.items() if not np.isfinite(np.sum(g, dtype=np.float64))]
        if bad:
            logger.warning("adam step rejected: non-finite gradient in %s", ", ".join(bad[:5]))
            return False
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            g = np.asarray(g, dtype=p.dtype)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= (self.lr / c1) * m / denom
        return True

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for k in self.params:
            state[k + MOMENT1_SUFFIX] = self.m[k]
            state[k + MOMENT2_SUFFIX] = self.v[k]
        state[STEP_KEY] = np.array([self.step_count], dtype=np.float64)
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k in self.params:
            if k + MOMENT1_SUFFIX in state:
                self.m[k] = np.array(state[k + MOMENT1_SUFFIX], dtype=self.params[k].dtype)
                self.v[k] = np.array(state[k + MOMENT2_SUFFIX], dtype=self.params[k].dtype)
        if STEP_KEY in state:
            self.step_count = int(np.asarray(state[STEP_KEY]).ravel()[0])


MOMENT1_SUFFIX = "::adam_m"
MOMENT2_SUFFIX = "::adam_v"
STEP_KEY = "::adam_step"
