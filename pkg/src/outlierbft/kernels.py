"""Hot-loop kernels: the compiled extension when built, else pure Python.

Set ``OUTLIERBFT_PURE=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
pbft_round = _kernels_py.pbft_round

if os.environ.get("OUTLIERBFT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        pbft_round = _compiled.pbft_round
        BACKEND = "cython"

python_pbft_round = _kernels_py.pbft_round
