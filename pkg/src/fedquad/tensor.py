"""Validated tensor primitives over the selected kernel backend.

All matrices are C-contiguous float64 2-D arrays. These wrappers check
shapes/values and normalize layout, then dispatch to fedquad.backend; the
numerical contracts (summation order, rounding) live in the kernels.
"""

from __future__ import annotations

import numpy as np

from fedquad import backend


class ShapeError(ValueError):
    """Operand shapes do not conform."""


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array, rejecting bad ranks."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def matmul(a, b) -> np.ndarray:
    """Deterministic a @ b (ascending-k accumulation per element)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    return backend.matmul(a, b)


def gelu(x) -> np.ndarray:
    return backend.gelu(as_matrix(x))


def gelu_backward(x, upstream) -> np.ndarray:
    x = as_matrix(x, "x")
    up = as_matrix(upstream, "upstream")
    if up.shape != x.shape:
        raise ShapeError(f"upstream shape {up.shape} != input shape {x.shape}")
    return backend.gelu_backward(x, up)


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Row-wise layer norm.

    Returns (y, mean, invstd); the stats are float64 per-row vectors kept for
    the backward pass (they are never quantized).
    """
    x = as_matrix(x, "x")
    g = np.ascontiguousarray(np.asarray(gain, dtype=np.float64).reshape(-1))
    b = np.ascontiguousarray(np.asarray(bias, dtype=np.float64).reshape(-1))
    if g.shape[0] != x.shape[1] or b.shape[0] != x.shape[1]:
        raise ShapeError("gain/bias width must match x columns")
    return backend.layer_norm(x, g, b, float(eps))


def layer_norm_backward(dy, x, gain, mean, invstd):
    dy = as_matrix(dy, "dy")
    x = as_matrix(x, "x")
    if dy.shape != x.shape:
        raise ShapeError("dy and x shapes differ")
    g = np.ascontiguousarray(np.asarray(gain, dtype=np.float64).reshape(-1))
    m = np.ascontiguousarray(np.asarray(mean, dtype=np.float64).reshape(-1))
    s = np.ascontiguousarray(np.asarray(invstd, dtype=np.float64).reshape(-1))
    return backend.layer_norm_backward(dy, x, g, m, s)


def row_sums(x) -> np.ndarray:
    """Left-to-right per-row sums (order-pinned, backend-identical)."""
    return backend.row_sums(as_matrix(x))
