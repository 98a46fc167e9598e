"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy
fallback is.  Set ``RADFLIP_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

from . import _fallback

if os.environ.get("RADFLIP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

decode_batch = _impl.decode_batch
encode_batch = _impl.encode_batch
grow_clusters = _impl.grow_clusters
flip_bits = _impl.flip_bits
xor_popcount = _impl.xor_popcount

__all__ = [
    "BACKEND",
    "decode_batch",
    "encode_batch",
    "grow_clusters",
    "flip_bits",
    "xor_popcount",
]
