"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Setting ``SPQRX_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

kernels = _pykernels
NAME = "python"

if os.environ.get("SPQRX_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        NAME = "cython"

__all__ = ["kernels", "NAME"]
