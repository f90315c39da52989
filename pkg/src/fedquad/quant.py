"""Block-wise absmax int8 activation quantization.

A float64 matrix is flattened row-major and cut into fixed-size blocks; each
block stores one float32 scale (absmax / 127) and one signed int8 code per
element. Codes stay in [-127, 127] (the -128 slot is unused, keeping the
codec symmetric). Rounding is either round-half-even ("nearest") or unbiased
stochastic rounding driven by a counter-based stream, in which case a
quantize call consumes exactly rows*cols counter slots.

Storage cost is rows*cols code bytes plus 4 bytes per block; there is no
container format or header, and quantized tensors are never persisted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedquad import backend
from fedquad.rng import RngStream

ROUNDING_MODES = ("nearest", "stochastic")


@dataclass(frozen=True)
class QuantSpec:
    """Codec parameters: block length and rounding mode."""

    block: int = 32
    rounding: str = "nearest"

    def __post_init__(self):
        if self.block < 1:
            raise ValueError(f"block must be >= 1, got {self.block}")
        if self.rounding not in ROUNDING_MODES:
            raise ValueError(f"rounding must be one of {ROUNDING_MODES}")


@dataclass
class QuantizedTensor:
    """Codes + per-block scales for one matrix, with its original shape."""

    rows: int
    cols: int
    codes: np.ndarray  # int8, flat row-major, length rows*cols
    scales: np.ndarray  # float32, one per block
    spec: QuantSpec

    def dequantize(self) -> np.ndarray:
        return dequantize(self)

    @property
    def stored_bytes(self) -> int:
        return stored_bytes((self.rows, self.cols), self.spec)


def num_blocks(shape: tuple[int, int], spec: QuantSpec) -> int:
    total = shape[0] * shape[1]
    return (total + spec.block - 1) // spec.block


def stored_bytes(shape: tuple[int, int], spec: QuantSpec) -> int:
    """Bytes held by a quantized matrix: 1 per code + 4 per block scale."""
    return shape[0] * shape[1] + num_blocks(shape, spec) * 4


def full_bytes(shape: tuple[int, int], bytes_per_value: int = 8) -> int:
    """Bytes held by the unquantized matrix (float64 unless stated)."""
    return shape[0] * shape[1] * bytes_per_value


def quantize(x, spec: QuantSpec, rng: RngStream | None = None) -> QuantizedTensor:
    """Encode a matrix; stochastic mode draws one uniform per element."""
    arr = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    if spec.rounding == "nearest":
        codes, scales = backend.quantize_nearest(arr, spec.block)
    else:
        if rng is None:
            raise ValueError("stochastic rounding requires an RngStream")
        base = rng.reserve(arr.shape[0] * arr.shape[1])
        codes, scales = backend.quantize_stochastic(arr, spec.block, rng.seed, base)
    return QuantizedTensor(arr.shape[0], arr.shape[1], codes, scales, spec)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Decode back to float64: code * its block's scale."""
    return backend.dequantize(qt.codes, qt.scales, qt.rows, qt.cols, qt.spec.block)
