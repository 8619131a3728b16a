"""Select the compiled kernels when available, else the pure-Python ones.

Set ``BOHLSPEC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("BOHLSPEC_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

tri_step = _impl.tri_step
forward_closed = _impl.forward_closed
window_closed = _impl.window_closed
span_sums = _impl.span_sums
dp45_piecewise = _impl.dp45_piecewise
transport_closed = _impl.transport_closed

# generic callable integrators exist only in Python
dp45_solve = _pykernels.dp45_solve
integrate_intervals = _pykernels.integrate_intervals
