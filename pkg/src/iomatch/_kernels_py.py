"""NumPy implementations of the row-wise kernels.

Used when the compiled ``_kernels`` extension is unavailable or disabled via
``IOMATCH_PURE_PYTHON=1``. Every function here has an identically named
counterpart in ``_kernels.pyx``; the two must agree to ~1e-12.
"""

import numpy as np


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True) if x.shape[1] else x
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def pair_softmax(logits):
    # columns (2k, 2k+1) hold the (inlier, outlier) logits of class k
    a = logits[:, 0::2]
    b = logits[:, 1::2]
    # numerically stable sigmoid(a - b)
    d = a - b
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def pair_softmax_backward(o, go):
    local = go * o * (1.0 - o)
    g = np.empty((o.shape[0], 2 * o.shape[1]))
    g[:, 0::2] = local
    g[:, 1::2] = -local
    return g


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, gy):
    return np.where(x > 0.0, gy, 0.0)


def row_argmax(x):
    # np.argmax already returns the first maximal index
    return np.argmax(x, axis=1).astype(np.int64)


def hard_negative_index(o, y):
    """Index of the negative class with the largest inlier probability.

    max_k o_k over k != y is the same as min_k log(1 - o_k); ties go to the
    lowest index.
    """
    masked = o.copy()
    masked[np.arange(o.shape[0]), y] = -np.inf
    return np.argmax(masked, axis=1).astype(np.int64)


def fuse_open_targets(p_tilde, o):
    n, k = p_tilde.shape
    q = np.empty((n, k + 1))
    q[:, :k] = p_tilde * o
    q[:, k] = (p_tilde * (1.0 - o)).sum(axis=1)
    return q
