"""Kernel selection: the Cython extension when built, numpy otherwise.

Set ``NAVIL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

fallback = _fallback
compiled = None
if os.environ.get("NAVIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled = None

active = compiled if compiled is not None else fallback
NAME = "cython" if compiled is not None else "numpy"
