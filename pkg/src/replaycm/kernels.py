"""Hot-loop kernel dispatch.

The numba implementations are used when numba imports cleanly and the
``REPLAYCM_NUMBA`` environment variable is not set to ``0``. Set it to
``0`` to force the pure-numpy path (useful for debugging and for the
parity benchmark). The choice is made once, at import.
"""
import os

import numpy as np

from . import _kernels_np

_WANT_NUMBA = os.environ.get("REPLAYCM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

HAS_NUMBA = False
if _WANT_NUMBA:
    try:
        from . import _kernels_nb
        HAS_NUMBA = True
    except ImportError:  # pragma: no cover - depends on the environment
        HAS_NUMBA = False

_impl = _kernels_nb if HAS_NUMBA else _kernels_np
BACKEND = "numba" if HAS_NUMBA else "numpy"


def context_unfold(x, offsets, start, out_len):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _impl.context_unfold(x, np.asarray(offsets, dtype=np.int64), int(start), int(out_len))


def context_fold(g, offsets, start, in_len):
    g = np.ascontiguousarray(g, dtype=np.float64)
    return _impl.context_fold(g, np.asarray(offsets, dtype=np.int64), int(start), int(in_len))


def maxpool_forward(x, pool):
    return _impl.maxpool_forward(np.ascontiguousarray(x, dtype=np.float64), int(pool))


def maxpool_backward(dy, idx, in_len):
    return _impl.maxpool_backward(
        np.ascontiguousarray(dy, dtype=np.float64),
        np.ascontiguousarray(idx, dtype=np.int64),
        int(in_len),
    )


def cqt_magnitudes(x, centers, kern_re, kern_im, kern_starts, kern_lens):
    return _impl.cqt_magnitudes(
        np.ascontiguousarray(x, dtype=np.float64),
        np.asarray(centers, dtype=np.int64),
        np.ascontiguousarray(kern_re, dtype=np.float64),
        np.ascontiguousarray(kern_im, dtype=np.float64),
        np.asarray(kern_starts, dtype=np.int64),
        np.asarray(kern_lens, dtype=np.int64),
    )
