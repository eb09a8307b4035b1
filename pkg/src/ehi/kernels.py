"""Numeric primitives shared by the encoder, indexer and trainer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, grad_p):
    """Pull a gradient back through ``p = softmax(logits)`` (last axis)."""
    return p * (grad_p - (grad_p * p).sum(axis=-1, keepdims=True))


def relu_residual(x, U):
    """``x + max(0, U^T x)``; ``x`` may be a single vector or a row batch."""
    x = np.asarray(x, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] != U.shape[1] or U.shape[0] != x.shape[-1]:
        raise ValueError(
            f"dimension mismatch: x has {x.shape[-1]} features, U is {U.shape}")
    return x + np.maximum(x @ U, 0.0)


def relu_residual_backward(x, U, grad_out):
    """Return ``(grad_x, grad_U)`` for :func:`relu_residual` on a row batch.

    The ReLU derivative is taken as 0 at exactly 0.
    """
    pre = x @ U
    g_pre = grad_out * (pre > 0)
    return grad_out + g_pre @ U.T, x.T @ g_pre


def finite_diff_grad(f, p, eps=1e-4):
    """Central-difference gradient of scalar ``f`` at flat vector ``p``."""
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps={eps} outside [1e-5, 1e-2]")
    p = np.array(p, dtype=np.float64).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + eps
        hi = f(p)
        p[i] = old - eps
        lo = f(p)
        p[i] = old
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@dataclass
class GradCheckReport:
    per_param_errors: list[tuple[str, float]]

    @property
    def max_rel_error(self) -> float:
        return max((e for _, e in self.per_param_errors), default=0.0)

    def format(self) -> str:
        lines = [f"{name:<12s} max_rel_error={err:.3e}"
                 for name, err in self.per_param_errors]
        lines.append(f"{'overall':<12s} max_rel_error={self.max_rel_error:.3e}")
        return "\n".join(lines)
