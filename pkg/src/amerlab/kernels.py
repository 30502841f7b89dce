"""Kernel backend selection.

The Cython extension is used when it has been built; otherwise the numpy
fallback is loaded. Set ``AMERLAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("AMERLAB_PURE_PYTHON"):
    from amerlab._pykernels import BACKEND, gelu_pair, hungarian_batch, topk_search
else:
    try:
        from amerlab._kernels import BACKEND, gelu_pair, hungarian_batch, topk_search
    except ImportError:  # extension not compiled
        from amerlab._pykernels import BACKEND, gelu_pair, hungarian_batch, topk_search

__all__ = ["BACKEND", "gelu_pair", "hungarian_batch", "topk_search"]
