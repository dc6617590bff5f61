"""Select the BM25 accumulation kernel at import time.

The compiled extension is preferred; set ``PTKBENCH_PURE_PYTHON=1`` to force the
pure-Python fallback.
"""

import os

from . import _bm25_py

if os.environ.get("PTKBENCH_PURE_PYTHON") == "1":
    accumulate = _bm25_py.accumulate
    BACKEND = "python"
else:
    try:
        from ._bm25_ext import accumulate
        BACKEND = "cython"
    except ImportError:
        accumulate = _bm25_py.accumulate
        BACKEND = "python"

__all__ = ["accumulate", "BACKEND"]
