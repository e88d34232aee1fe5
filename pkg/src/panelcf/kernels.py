"""Kernel dispatch: compiled extension when built, NumPy fallback otherwise.

Set the environment variable ``PANELCF_PURE_PYTHON=1`` to force the
fallback (used by the benchmark and the kernel-agreement tests).
"""

import os

from . import _kernels_py

if os.environ.get("PANELCF_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

HAVE_COMPILED = _impl.HAVE_COMPILED
alternating_demean = _impl.alternating_demean

fallback_alternating_demean = _kernels_py.alternating_demean
