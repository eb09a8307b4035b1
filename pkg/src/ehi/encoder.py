"""Trainable affine head over frozen base embeddings, and the triplet hinge."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METRICS = ("cosine", "dot")


@dataclass
class EncoderParams:
    W: np.ndarray
    b: np.ndarray
    normalize: bool = True

    @classmethod
    def identity(cls, dim: int, normalize: bool = True) -> "EncoderParams":
        return cls(np.eye(dim), np.zeros(dim), normalize)

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.W.copy(), self.b.copy(), self.normalize)


def _check_dim(x, theta):
    if x.shape[-1] != theta.dim:
        raise ValueError(
            f"dimension mismatch: input has {x.shape[-1]}, encoder expects {theta.dim}")


def encode(base, theta: EncoderParams):
    """Map base embedding(s) to retrieval space.

    Accepts a single vector or a row batch; computes ``base @ W + b`` in
    float64 and L2-normalizes rows when ``theta.normalize`` is set.
    """
    x = np.asarray(base, dtype=np.float64)
    _check_dim(x, theta)
    z = x @ theta.W + theta.b
    if not theta.normalize:
        return z
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / np.maximum(norm, 1e-12)


def encode_with_cache(base, theta: EncoderParams):
    x = np.asarray(base, dtype=np.float64)
    _check_dim(x, theta)
    z = x @ theta.W + theta.b
    if not theta.normalize:
        return z, (x, z, None)
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return z / norm, (x, z, norm)


def encode_backward(cache, grad_out, theta: EncoderParams):
    """Return ``(grad_W, grad_b)`` for a batch encoded by :func:`encode_with_cache`."""
    x, z, norm = cache
    if norm is None:
        gz = grad_out
    else:
        u = z / norm
        gz = (grad_out - u * (grad_out * u).sum(axis=1, keepdims=True)) / norm
    return x.T @ gz, gz.sum(axis=0)


def similarity(a, b, metric: str = "cosine") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    dot = float(a @ b)
    if metric == "dot":
        return dot
    if metric != "cosine":
        raise ValueError(f"unknown metric {metric!r}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(dot / (na * nb), -1.0, 1.0))


def score_matrix(queries, docs, metric: str = "cosine"):
    """Pairwise similarity between query rows and doc rows (float64)."""
    q = np.asarray(queries, dtype=np.float64)
    d = np.asarray(docs, dtype=np.float64)
    if metric == "cosine":
        q = q / np.maximum(np.linalg.norm(q, axis=-1, keepdims=True), 1e-12)
        d = d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)
    elif metric != "dot":
        raise ValueError(f"unknown metric {metric!r}")
    return q @ d.T


def triplet_loss(q, d_pos, d_neg, gamma: float = 0.3) -> float:
    """``max(0, q.d_neg - q.d_pos + gamma)``."""
    q, d_pos, d_neg = (np.asarray(v, dtype=np.float64) for v in (q, d_pos, d_neg))
    if not q.shape == d_pos.shape == d_neg.shape:
        raise ValueError("dimension mismatch")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    return max(0.0, float(q @ d_neg - q @ d_pos + gamma))


def triplet_loss_grad(q, d_pos, d_neg, gamma: float = 0.3):
    """Subgradients of :func:`triplet_loss` wrt ``(q, d_pos, d_neg)``.

    Zero when the hinge is inactive or sits exactly on the kink.
    """
    q, d_pos, d_neg = (np.asarray(v, dtype=np.float64) for v in (q, d_pos, d_neg))
    if q @ d_neg - q @ d_pos + gamma > 0:
        return d_neg - d_pos, -q, q.copy()
    zero = np.zeros_like(q)
    return zero, zero.copy(), zero.copy()
