"""Kernel backend selection.

Imports the compiled extension when present, else the pure-Python fallback;
the two are bit-identical so everything downstream is backend-agnostic.
Set FEDQUAD_BACKEND=compiled or FEDQUAD_BACKEND=python to force a choice
(compiled raises if the extension is missing; useful in CI).
"""

from __future__ import annotations

import os

_choice = os.environ.get("FEDQUAD_BACKEND", "").strip().lower()
if _choice not in ("", "compiled", "python"):
    raise RuntimeError(
        f"FEDQUAD_BACKEND must be 'compiled' or 'python', got {_choice!r}"
    )

if _choice == "python":
    from fedquad import _pykernels as _impl
else:
    try:
        from fedquad import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "compiled":
            raise
        from fedquad import _pykernels as _impl

BACKEND_NAME: str = _impl.NAME

matmul = _impl.matmul
gelu = _impl.gelu
gelu_backward = _impl.gelu_backward
layer_norm = _impl.layer_norm
layer_norm_backward = _impl.layer_norm_backward
quantize_nearest = _impl.quantize_nearest
quantize_stochastic = _impl.quantize_stochastic
dequantize = _impl.dequantize
row_sums = _impl.row_sums
raw_uniform = _impl.raw_uniform
