"""NT-Xent and binary cross-entropy with analytic gradients.

Embedding batches are ``(2N, d)`` arrays with the two views of item ``i`` at
rows ``2i`` and ``2i + 1``. Similarities are plain dot products of the rows,
which equal cosine similarities for the unit rows callers pass in; the
gradient treats rows as free variables, so callers that normalize must
apply the normalization Jacobian themselves.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ArgumentError


def _check(z: np.ndarray, tau: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not tau > 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")
    if z.ndim != 2 or z.shape[0] == 0 or z.shape[0] % 2:
        raise ArgumentError(f"expected a (2N, d) batch with N >= 1, got shape {z.shape}")
    return z


def positive_index(m: int) -> np.ndarray:
    return np.arange(m) ^ 1


def validate_batch(z: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Check an embedding batch is well-formed with unit-norm rows."""
    z = _check(z, 1.0)
    norms = np.sqrt(np.sum(z * z, axis=1))
    if np.any(np.abs(norms - 1.0) > tol):
        raise ArgumentError("embedding rows must be unit-norm")
    return z


def _logits(z: np.ndarray, tau: float) -> np.ndarray:
    s = (z @ z.T) / tau
    np.fill_diagonal(s, -np.inf)
    return s


def nt_xent_loss(z: np.ndarray, tau: float = 0.1) -> float:
    """Mean over all 2N anchors of -log softmax_{k != i}(s_ik / tau)[positive]."""
    z = _check(z, tau)
    s = _logits(z, tau)
    m = z.shape[0]
    top = s.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(s - top).sum(axis=1))
    pos = s[np.arange(m), positive_index(m)]
    return float(np.mean(lse - pos))


def nt_xent_grad(z: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """d nt_xent_loss / d z, shape (2N, d)."""
    z = _check(z, tau)
    s = _logits(z, tau)
    m = z.shape[0]
    p = np.exp(s - s.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(m), positive_index(m)] -= 1.0
    p /= m
    return (p + p.T) @ z / tau


def nt_xent_loss_and_grad(z: np.ndarray, tau: float = 0.1) -> tuple[float, np.ndarray]:
    return nt_xent_loss(z, tau), nt_xent_grad(z, tau)


def softplus(x: float) -> float:
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_with_logit(logit: float, label: int) -> tuple[float, float]:
    """Binary cross-entropy on a logit; returns ``(loss, dloss/dlogit)``.

    ``log(1 + exp(-x)) + (1 - y) x`` is evaluated as ``softplus(-x)`` for
    ``y = 1`` and ``softplus(x)`` for ``y = 0``, which never overflows.
    """
    if label not in (0, 1):
        raise ArgumentError(f"label must be 0 or 1, got {label}")
    logit = float(logit)
    loss = softplus(-logit) if label == 1 else softplus(logit)
    return loss, sigmoid(logit) - label


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``bce_with_logit``; returns per-example losses and gradients."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    signed = np.where(y == 1, -x, x)
    loss = np.maximum(signed, 0.0) + np.log1p(np.exp(-np.abs(signed)))
    return loss, sigmoid_array(x) - y
