"""Pure-Python/numpy fallback kernels, bit-identical to the compiled ones.

Each function mirrors the expression tree and accumulation order of its
fedquad._kernels counterpart exactly:

* reductions use ``np.cumsum(...)[-1]``, whose final element is a strict
  left-to-right sum (numpy's ``np.sum`` is pairwise and would differ);
* matmul accumulates rank-1 updates in ascending k, matching the compiled
  i-k-j loop per output element;
* tanh goes through ``math.tanh`` (the same libm call the compiled kernel
  makes; ``np.tanh`` takes a different code path and differs in the last ulp);
* groupings match the compiled source (the only reordering tolerated is with
  exact power-of-two factors).

tests/test_backends.py asserts exact equality between the two backends.
"""

from __future__ import annotations

import math

import numpy as np

NAME = "python"

KAPPA = 0.7978845608028654  # sqrt(2/pi)
C3 = 0.044715
_INV_2_53 = 1.0 / 9007199254740992.0

_U64 = np.uint64
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)
_GOLDEN = _U64(0x9E3779B97F4A7C15)


def _mix64_vec(z):
    z = (z ^ (z >> _U64(30))) * _M1
    z = (z ^ (z >> _U64(27))) * _M2
    return z ^ (z >> _U64(31))


def raw_uniform(seed, index):
    """Uniform [0,1) at an absolute counter slot; parity hook for tests."""
    mask = (1 << 64) - 1
    z = (seed + index * 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    z = (z ^ (z >> 31)) & mask
    return (z >> 11) * _INV_2_53


def _row_sums(x):
    # last cumsum column == sequential left-to-right sum, bit for bit
    return np.cumsum(x, axis=1)[:, -1]


def row_sums(x):
    """Per-row sums in ascending column order."""
    return _row_sums(np.asarray(x, dtype=np.float64))


def matmul(a, b):
    """a @ b with each output element accumulated in ascending k order."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for k in range(kk):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _tanh_elementwise(x):
    flat = [math.tanh(v) for v in x.ravel().tolist()]
    return np.array(flat, dtype=np.float64).reshape(x.shape)


def gelu(x):
    """tanh-approximate GELU: 0.5*x*(1 + tanh(KAPPA*(x + C3*x^3)))."""
    x2 = x * x
    x3 = x2 * x
    inner = KAPPA * (x + C3 * x3)
    th = _tanh_elementwise(inner)
    return 0.5 * x * (1.0 + th)


def gelu_backward(x, upstream):
    """upstream * d gelu(x) / dx, recomputed from the saved input."""
    tc3 = 3.0 * C3
    x2 = x * x
    x3 = x2 * x
    inner = KAPPA * (x + C3 * x3)
    th = _tanh_elementwise(inner)
    sech2 = 1.0 - th * th
    dpoly = KAPPA * (1.0 + tc3 * x2)
    d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * dpoly
    return upstream * d


def layer_norm(x, gain, bias, eps):
    """Row-wise layer norm; returns (y, mean, invstd) with f64 stats."""
    n = x.shape[1]
    mean = _row_sums(x) / n
    xc = x - mean[:, None]
    var = _row_sums(xc * xc) / n
    invstd = 1.0 / np.sqrt(var + eps)
    y = xc * invstd[:, None] * gain[None, :] + bias[None, :]
    return y, mean, invstd


def layer_norm_backward(dy, x, gain, mean, invstd):
    """Gradients of layer_norm wrt input, gain, bias from saved stats."""
    m, n = x.shape
    if m == 0:
        return (np.zeros((0, n)), np.zeros(n), np.zeros(n))
    xh = (x - mean[:, None]) * invstd[:, None]
    gi = dy * gain[None, :]
    c1 = _row_sums(gi) / n
    c2 = _row_sums(gi * xh) / n
    dx = (gi - c1[:, None] - xh * c2[:, None]) * invstd[:, None]
    dgain = np.cumsum(dy * xh, axis=0)[-1, :]
    dbias = np.cumsum(dy, axis=0)[-1, :]
    return dx, dgain, dbias


def _block_bounds(total, block):
    nblocks = (total + block - 1) // block
    for b in range(nblocks):
        lo = b * block
        yield b, lo, min(lo + block, total)


def quantize_nearest(x, block):
    """Block absmax int8 codec, round-half-even; returns (codes, scales)."""
    xf = x.reshape(-1)
    total = xf.shape[0]
    nblocks = (total + block - 1) // block
    codes = np.zeros(total, dtype=np.int8)
    scales = np.zeros(nblocks, dtype=np.float32)
    for b, lo, hi in _block_bounds(total, block):
        amax = float(np.max(np.abs(xf[lo:hi])))
        s32 = np.float32(amax / 127.0)
        scales[b] = s32
        if s32 == 0.0:
            continue
        q = np.rint(xf[lo:hi] / np.float64(s32))
        codes[lo:hi] = np.clip(q, -127.0, 127.0).astype(np.int8)
    return codes, scales


def quantize_stochastic(x, block, seed, base):
    """Block absmax int8 codec with unbiased stochastic rounding.

    Element at flat index e draws its uniform from counter slot base+1+e of
    the given stream seed, so consumption depends only on the tensor shape.
    """
    xf = x.reshape(-1)
    total = xf.shape[0]
    nblocks = (total + block - 1) // block
    codes = np.zeros(total, dtype=np.int8)
    scales = np.zeros(nblocks, dtype=np.float32)
    idx = np.arange(total, dtype=np.uint64) + _U64((base + 1) & ((1 << 64) - 1))
    z = _mix64_vec(_U64(seed & ((1 << 64) - 1)) + idx * _GOLDEN)
    u = (z >> _U64(11)).astype(np.float64) * _INV_2_53
    for b, lo, hi in _block_bounds(total, block):
        amax = float(np.max(np.abs(xf[lo:hi])))
        s32 = np.float32(amax / 127.0)
        scales[b] = s32
        if s32 == 0.0:
            continue
        y = xf[lo:hi] / np.float64(s32)
        f = np.floor(y)
        frac = y - f
        q = f + (u[lo:hi] < frac).astype(np.float64)
        codes[lo:hi] = np.clip(q, -127.0, 127.0).astype(np.int8)
    return codes, scales


def dequantize(codes, scales, rows, cols, block):
    """Reconstruct float64 values: code * block scale."""
    total = rows * cols
    per_element = np.repeat(scales.astype(np.float64), block)[:total]
    out = codes.astype(np.float64) * per_element
    return out.reshape(rows, cols)
