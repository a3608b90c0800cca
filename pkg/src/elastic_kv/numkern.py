"""Small dense kernels shared by the model, the cache policies and the metrics.

Matrices are plain 2-D ``float64`` numpy arrays. Every kernel validates shapes
and refuses to hand back non-finite values.
"""

from __future__ import annotations

import numpy as np


class NumericError(ValueError):
    """Raised on shape mismatch or when a kernel would emit NaN/Inf."""


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise NumericError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{what} produced non-finite values")
    return x


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with a shape check.

    Vectors and batched (3-D) operands follow ``numpy.matmul`` as long as the
    inner dimensions agree.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 0 or b.ndim == 0:
        raise NumericError("matmul needs array operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise NumericError(f"dimension mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a, b)
    return _finite(out, "matmul")


def softmax_rows(scores) -> np.ndarray:
    """Softmax over the last axis with per-row max subtraction."""
    s = np.asarray(scores, dtype=np.float64)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return _finite(e / e.sum(axis=-1, keepdims=True), "softmax")


def causal_mask(t: int) -> np.ndarray:
    """Boolean ``(t, t)`` mask, True on and below the diagonal."""
    return np.tril(np.ones((t, t), dtype=bool))


def row_softmax_causal(scores) -> np.ndarray:
    """Causal softmax: row ``m`` is normalised over columns ``0..m`` only.

    The denominator includes the diagonal term. Works on ``(T, T)`` or a stack
    ``(..., T, T)`` of square score matrices; the upper triangle is exactly 0.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise NumericError(f"causal softmax needs square scores, got {s.shape}")
    mask = causal_mask(s.shape[-1])
    s = np.where(mask, s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(s), 0.0)
    return _finite(e / e.sum(axis=-1, keepdims=True), "causal softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return _finite((x - mu) / np.sqrt(var + eps) * gain + bias, "layer_norm")


def gelu(x) -> np.ndarray:
    # tanh approximation
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def logsumexp(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m
    return _finite(np.squeeze(out, axis=axis), "logsumexp")


def log_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x - logsumexp(x, axis=-1)[..., None]


def argmax(x) -> int:
    """Index of the largest entry of a vector; ties go to the smaller index."""
    return int(np.argmax(np.asarray(x)))


def top_k(x, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries, best first.

    Equal values are ordered by ascending index, so ties favour the smaller
    index.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= k <= x.shape[0]:
        raise NumericError(f"k={k} out of range for length {x.shape[0]}")
    order = np.lexsort((np.arange(x.shape[0]), -x))
    return order[:k]
