"""Backend selection for the numeric kernels.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback is used. Set ``RAINREID_PURE_PYTHON=1`` to force the fallback.
"""

import os

from rainreid import _kernels_py

if os.environ.get("RAINREID_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from rainreid import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

area_downsample = _impl.area_downsample
bilinear_resize = _impl.bilinear_resize
pairwise_euclidean = _impl.pairwise_euclidean
match_positions = _impl.match_positions

__all__ = [
    "BACKEND",
    "area_downsample",
    "bilinear_resize",
    "pairwise_euclidean",
    "match_positions",
]
