"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``LONGISEG_DISABLE_NUMBA`` is set to a truthy value (``1``,
``true``, ``yes``). The flag is read once at import time. Both paths return
identical results; ``BACKEND`` names the active one.
"""

import os

from . import _numpy

_disabled = os.environ.get("LONGISEG_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

if _disabled:
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba missing
        _impl = _numpy
        BACKEND = "numpy"

sample_trilinear = _impl.sample_trilinear
label_components = _impl.label_components
neighbor_offsets = _numpy.neighbor_offsets

__all__ = ["BACKEND", "sample_trilinear", "label_components", "neighbor_offsets"]
