"""Backend selection for the kernels in :mod:`nepadd.kernels`.

Set ``NEPADD_NUMBA=0`` to force the pure-numpy path. numba is also skipped
silently when it cannot be imported.
"""
import os

from nepadd import kernels as _py

_FLAG = os.environ.get("NEPADD_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "off", "no")

_KERNELS = ("lstm_forward", "lstm_backward", "ar1_filter")

numpy_kernels = {name: getattr(_py, name) for name in _KERNELS}

if HAVE_NUMBA:
    numba_kernels = {
        name: numba.njit(cache=True, nogil=True)(fn) for name, fn in numpy_kernels.items()
    }
else:  # pragma: no cover
    numba_kernels = {}

active = numba_kernels if USE_NUMBA else numpy_kernels
BACKEND = "numba" if USE_NUMBA else "numpy"

lstm_forward = active["lstm_forward"]
lstm_backward = active["lstm_backward"]
ar1_filter = active["ar1_filter"]
