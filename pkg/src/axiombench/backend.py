"""Kernel backend selection.

The convolution and pooling inner loops exist twice: a compiled Cython
extension (``_kernels_cy``) and a pure-numpy fallback (``_kernels_np``).
The compiled one is picked automatically when importable; set
``AXIOMBENCH_BACKEND=numpy`` or ``=cython`` to force a choice.
Both produce the same results up to float64 summation order.
"""

import os

from . import _kernels_np

_FORCED = os.environ.get("AXIOMBENCH_BACKEND", "auto").lower()

if _FORCED not in ("auto", "numpy", "cython"):
    raise RuntimeError(f"AXIOMBENCH_BACKEND must be auto|numpy|cython, got {_FORCED!r}")

if _FORCED == "numpy":
    kernels = _kernels_np
else:
    try:
        from . import _kernels_cy as kernels
    except ImportError:
        if _FORCED == "cython":
            raise RuntimeError("AXIOMBENCH_BACKEND=cython but the compiled extension is not built")
        kernels = _kernels_np


def backend_name() -> str:
    """Name of the kernel backend in use ('cython' or 'numpy')."""
    return kernels.NAME
