"""Global (shape + root rotation) and local (per-joint rotation) parameter heads."""
from __future__ import annotations

import logging

import numpy as np

from . import tensor as T
from .backbone import GLOBAL_DIM

log = logging.getLogger(__name__)

NUM_GLOBAL = 19  # 10 shape coefficients + vectorized root rotation
GCN_WIDTH = 128
_VEC_IDENTITY = np.eye(3).reshape(9)


class GlobalHead(T.Module):
    """Cross-attention from the global feature onto completed joint features,
    edge convolution per joint, max over joints, linear readout."""

    def __init__(self, rng: np.random.Generator, num_betas: int = 10, dim: int = GLOBAL_DIM):
        self.dim = dim
        self.num_betas = num_betas
        self.query = T.Linear(dim, dim, rng, scale=np.sqrt(1.0 / dim))
        self.key = T.Linear(dim, dim, rng, scale=np.sqrt(1.0 / dim))
        self.value = T.Linear(dim, dim, rng, scale=np.sqrt(1.0 / dim))
        self.edge = T.Linear(2 * dim, dim, rng)
        self.out = T.Linear(dim, num_betas + 9, rng, scale=0.01)
        self.out.bias.data[num_betas:] = _VEC_IDENTITY

    def attention(self, g: T.Tensor, q: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        logits = T.mul(T.matmul(self.query(g), T.transpose(self.key(q))), 1.0 / np.sqrt(self.dim))
        weights = T.softmax(logits, axis=1)  # (1, K)
        return weights, T.matmul(weights, self.value(q))

    def __call__(self, g: T.Tensor, q: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        """Returns (betas (S,), raw root rotation (3, 3))."""
        _, g_att = self.attention(g, q)
        edges = T.relu(self.edge(T.concat([q, T.sub(g_att, q)], axis=1)))  # (K, dim)
        pooled = T.max(edges, axis=0, keepdims=True)
        phi = T.reshape(self.out(pooled), (self.num_betas + 9,))
        betas = T.index(phi, slice(0, self.num_betas))
        root = T.reshape(T.index(phi, slice(self.num_betas, self.num_betas + 9)), (3, 3))
        return betas, root


def normalized_adjacency(parents: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 for the undirected kinematic tree."""
    K = len(parents)
    A = np.eye(K)
    for k, p in enumerate(parents):
        if p >= 0:
            A[k, p] = A[p, k] = 1.0
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


class LocalHead(T.Module):
    """Two graph-convolution layers over the skeleton, per-joint 9-vector readout."""

    def __init__(self, parents: np.ndarray, rng: np.random.Generator, in_dim: int = GLOBAL_DIM + 3):
        self.adjacency = normalized_adjacency(np.asarray(parents))
        self.gc1 = T.Linear(in_dim, GCN_WIDTH, rng)
        self.gc2 = T.Linear(GCN_WIDTH, GCN_WIDTH, rng)
        self.out = T.Linear(GCN_WIDTH, 9, rng, scale=0.01)
        self.out.bias.data[:] = _VEC_IDENTITY

    def _conv(self, layer: T.Linear, h: T.Tensor) -> T.Tensor:
        A = T.Tensor(self.adjacency.astype(h.dtype))
        return T.relu(T.add(T.matmul(A, T.matmul(h, layer.weight)), layer.bias))

    def __call__(self, positions: T.Tensor, features: T.Tensor) -> T.Tensor:
        """Raw local rotations (K-1, 3, 3) for every non-root joint in tree order."""
        h = T.concat([positions, features], axis=1)
        h = self._conv(self.gc2, self._conv(self.gc1, h))
        out = self.out(h)  # (K, 9)
        K = out.shape[0]
        return T.reshape(T.index(out, slice(1, K)), (K - 1, 3, 3))


def project_rotation(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Nearest proper rotation to ``raw`` (Frobenius sense).

    Returns ``(R, ok)``; a rank-deficient input yields the identity with
    ``ok = False``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite rotation")
    U, s, Vt = np.linalg.svd(raw)
    if s[-1] <= 1e-9 * max(s[0], 1e-300) or s[0] == 0:
        log.warning("rank-deficient rotation estimate; substituting identity")
        return np.eye(3), False
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt, True


def project_rotations(raws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = [project_rotation(r) for r in np.asarray(raws).reshape(-1, 3, 3)]
    return np.stack([r for r, _ in out]), np.array([ok for _, ok in out])
