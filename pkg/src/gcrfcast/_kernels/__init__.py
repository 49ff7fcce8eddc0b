"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built and imports cleanly.
Setting ``GCRFCAST_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("GCRFCAST_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

common_history = _active.common_history
jsd_matrix = _active.jsd_matrix
pair_bin_stats = _active.pair_bin_stats
selected_inverse = _active.selected_inverse

__all__ = [
    "BACKEND",
    "common_history",
    "compiled_backend",
    "jsd_matrix",
    "pair_bin_stats",
    "python_backend",
    "selected_inverse",
]
