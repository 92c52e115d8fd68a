"""Backend selection for the row-wise kernels.

The compiled extension is preferred; set ``IOMATCH_PURE_PYTHON=1`` to force
the NumPy fallback (useful for benchmarking and for environments without a
C compiler).
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("IOMATCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def softmax_rows(x):
    return _impl.softmax_rows(_c(x))


def softmax_rows_backward(y, gy):
    return _impl.softmax_rows_backward(_c(y), _c(gy))


def pair_softmax(logits):
    return _impl.pair_softmax(_c(logits))


def pair_softmax_backward(o, go):
    return _impl.pair_softmax_backward(_c(o), _c(go))


def relu(x):
    return _impl.relu(_c(x))


def relu_backward(x, gy):
    return _impl.relu_backward(_c(x), _c(gy))


def row_argmax(x):
    return _impl.row_argmax(_c(x))


def hard_negative_index(o, y):
    return _impl.hard_negative_index(_c(o), _i(y))


def fuse_open_targets(p_tilde, o):
    return _impl.fuse_open_targets(_c(p_tilde), _c(o))
