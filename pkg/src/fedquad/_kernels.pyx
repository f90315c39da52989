# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled float64 kernels with pinned evaluation order.

Every reduction here runs in ascending index order and every elementwise
expression mirrors the tree used by fedquad._pykernels, so the two backends
produce bit-identical output (the build disables FMA contraction). Changing
an expression in one backend requires the same change in the other.
"""

import numpy as np

from libc.math cimport tanh, sqrt, fabs, floor, rint
from libc.stdint cimport uint64_t, int8_t

NAME = "compiled"

cdef double KAPPA = 0.7978845608028654   # sqrt(2/pi)
cdef double C3 = 0.044715
cdef double INV_2_53 = 1.0 / 9007199254740992.0
cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15UL


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9UL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBUL
    return z ^ (z >> 31)


cdef inline double _u01(uint64_t seed, uint64_t index) nogil:
    return <double>(_mix64(seed + index * GOLDEN) >> 11) * INV_2_53


def raw_uniform(seed, index):
    """Uniform [0,1) at an absolute counter slot; parity hook for tests."""
    return _u01(<uint64_t>seed, <uint64_t>index)


def matmul(double[:, ::1] a, double[:, ::1] b):
    """a @ b with each output element accumulated in ascending k order."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, j
    cdef double aik
    with nogil:
        for i in range(m):
            for k in range(kk):
                aik = a[i, k]
                for j in range(n):
                    out[i, j] = out[i, j] + aik * b[k, j]
    return out_arr


def gelu(double[:, ::1] x):
    """tanh-approximate GELU: 0.5*x*(1 + tanh(KAPPA*(x + C3*x^3)))."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v, x2, x3, inner, th
    with nogil:
        for i in range(m):
            for j in range(n):
                v = x[i, j]
                x2 = v * v
                x3 = x2 * v
                inner = KAPPA * (v + C3 * x3)
                th = tanh(inner)
                out[i, j] = 0.5 * v * (1.0 + th)
    return out_arr


def gelu_backward(double[:, ::1] x, double[:, ::1] upstream):
    """upstream * d gelu(x) / dx, recomputed from the saved input."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v, x2, x3, inner, th, sech2, dpoly, d
    cdef double tc3 = 3.0 * C3
    with nogil:
        for i in range(m):
            for j in range(n):
                v = x[i, j]
                x2 = v * v
                x3 = x2 * v
                inner = KAPPA * (v + C3 * x3)
                th = tanh(inner)
                sech2 = 1.0 - th * th
                dpoly = KAPPA * (1.0 + tc3 * x2)
                d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * dpoly
                out[i, j] = upstream[i, j] * d
    return out_arr


def layer_norm(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    """Row-wise layer norm; returns (y, mean, invstd) with f64 stats."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    y_arr = np.empty((m, n), dtype=np.float64)
    mean_arr = np.empty(m, dtype=np.float64)
    inv_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t i, j
    cdef double s, mu, dlt, var, istd
    with nogil:
        for i in range(m):
            s = 0.0
            for j in range(n):
                s = s + x[i, j]
            mu = s / n
            var = 0.0
            for j in range(n):
                dlt = x[i, j] - mu
                var = var + dlt * dlt
            var = var / n
            istd = 1.0 / sqrt(var + eps)
            mean[i] = mu
            inv[i] = istd
            for j in range(n):
                y[i, j] = (x[i, j] - mu) * istd * gain[j] + bias[j]
    return y_arr, mean_arr, inv_arr


def layer_norm_backward(double[:, ::1] dy, double[:, ::1] x,
                        double[::1] gain, double[::1] mean, double[::1] invstd):
    """Gradients of layer_norm wrt input, gain, bias from saved stats."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    dx_arr = np.empty((m, n), dtype=np.float64)
    dgain_arr = np.zeros(n, dtype=np.float64)
    dbias_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef Py_ssize_t i, j
    cdef double mu, istd, xh, gi, s1, s2, c1, c2, t
    with nogil:
        for i in range(m):
            mu = mean[i]
            istd = invstd[i]
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                xh = (x[i, j] - mu) * istd
                gi = dy[i, j] * gain[j]
                s1 = s1 + gi
                s2 = s2 + gi * xh
            c1 = s1 / n
            c2 = s2 / n
            for j in range(n):
                xh = (x[i, j] - mu) * istd
                gi = dy[i, j] * gain[j]
                t = gi - c1 - xh * c2
                dx[i, j] = t * istd
                dgain[j] = dgain[j] + dy[i, j] * xh
                dbias[j] = dbias[j] + dy[i, j]
    return dx_arr, dgain_arr, dbias_arr


def quantize_nearest(double[:, ::1] x, Py_ssize_t block):
    """Block absmax int8 codec, round-half-even; returns (codes, scales)."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t total = m * n
    cdef Py_ssize_t nblocks = (total + block - 1) // block
    codes_arr = np.zeros(total, dtype=np.int8)
    scales_arr = np.zeros(nblocks, dtype=np.float32)
    cdef int8_t[::1] codes = codes_arr
    cdef float[::1] scales = scales_arr
    cdef const double* xf = &x[0, 0] if total > 0 else NULL
    cdef Py_ssize_t b, lo, hi, e
    cdef double amax, v, q
    cdef float s32
    with nogil:
        for b in range(nblocks):
            lo = b * block
            hi = lo + block
            if hi > total:
                hi = total
            amax = 0.0
            for e in range(lo, hi):
                v = fabs(xf[e])
                if v > amax:
                    amax = v
            s32 = <float>(amax / 127.0)
            scales[b] = s32
            if s32 == 0.0:
                continue
            for e in range(lo, hi):
                q = rint(xf[e] / <double>s32)
                if q > 127.0:
                    q = 127.0
                elif q < -127.0:
                    q = -127.0
                codes[e] = <int8_t>q
    return codes_arr, scales_arr


def quantize_stochastic(double[:, ::1] x, Py_ssize_t block, seed, base):
    """Block absmax int8 codec with unbiased stochastic rounding.

    Element at flat index e draws its uniform from counter slot base+1+e of
    the given stream seed, so consumption depends only on the tensor shape.
    """
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t total = m * n
    cdef Py_ssize_t nblocks = (total + block - 1) // block
    codes_arr = np.zeros(total, dtype=np.int8)
    scales_arr = np.zeros(nblocks, dtype=np.float32)
    cdef int8_t[::1] codes = codes_arr
    cdef float[::1] scales = scales_arr
    cdef const double* xf = &x[0, 0] if total > 0 else NULL
    cdef uint64_t seed_u = <uint64_t>seed
    cdef uint64_t base_u = <uint64_t>base
    cdef Py_ssize_t b, lo, hi, e
    cdef double amax, v, y, f, frac, u, q
    cdef float s32
    with nogil:
        for b in range(nblocks):
            lo = b * block
            hi = lo + block
            if hi > total:
                hi = total
            amax = 0.0
            for e in range(lo, hi):
                v = fabs(xf[e])
                if v > amax:
                    amax = v
            s32 = <float>(amax / 127.0)
            scales[b] = s32
            if s32 == 0.0:
                continue
            for e in range(lo, hi):
                y = xf[e] / <double>s32
                f = floor(y)
                frac = y - f
                u = _u01(seed_u, base_u + 1 + <uint64_t>e)
                if u < frac:
                    q = f + 1.0
                else:
                    q = f
                if q > 127.0:
                    q = 127.0
                elif q < -127.0:
                    q = -127.0
                codes[e] = <int8_t>q
    return codes_arr, scales_arr


def dequantize(const int8_t[::1] codes, const float[::1] scales,
               Py_ssize_t rows, Py_ssize_t cols, Py_ssize_t block):
    """Reconstruct float64 values: code * block scale."""
    cdef Py_ssize_t total = rows * cols
    out_arr = np.empty(total, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t e
    with nogil:
        for e in range(total):
            out[e] = <double>codes[e] * <double>scales[e // block]
    return out_arr.reshape(rows, cols)


def row_sums(double[:, ::1] x):
    """Per-row sums in ascending column order."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.zeros(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double s
    with nogil:
        for i in range(m):
            s = 0.0
            for j in range(n):
                s = s + x[i, j]
            out[i] = s
    return out_arr
