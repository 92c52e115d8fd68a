# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels. Semantics mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double mx, s
    if m == 0:
        return out
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(m):
            y[i, j] = y[i, j] / s
    return out


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] g = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            g[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def pair_softmax(const double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0], k = logits.shape[1] // 2, i, c
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    cdef double d, e
    for i in range(n):
        for c in range(k):
            d = logits[i, 2 * c] - logits[i, 2 * c + 1]
            if d >= 0:
                o[i, c] = 1.0 / (1.0 + exp(-d))
            else:
                e = exp(d)
                o[i, c] = e / (1.0 + e)
    return out


def pair_softmax_backward(const double[:, ::1] o, const double[:, ::1] go):
    cdef Py_ssize_t n = o.shape[0], k = o.shape[1], i, c
    out = np.empty((n, 2 * k))
    cdef double[:, ::1] g = out
    cdef double local
    for i in range(n):
        for c in range(k):
            local = go[i, c] * o[i, c] * (1.0 - o[i, c])
            g[i, 2 * c] = local
            g[i, 2 * c + 1] = -local
    return out


def relu(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    for i in range(n):
        for j in range(m):
            y[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out


def relu_backward(const double[:, ::1] x, const double[:, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] g = out
    for i in range(n):
        for j in range(m):
            g[i, j] = gy[i, j] if x[i, j] > 0.0 else 0.0
    return out


def row_argmax(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j, best
    out = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = out
    for i in range(n):
        best = 0
        for j in range(1, m):
            if x[i, j] > x[i, best]:
                best = j
        idx[i] = best
    return out


def hard_negative_index(const double[:, ::1] o, const cnp.int64_t[::1] y):
    cdef Py_ssize_t n = o.shape[0], k = o.shape[1], i, c, best
    out = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = out
    for i in range(n):
        best = -1
        for c in range(k):
            if c == y[i]:
                continue
            if best < 0 or o[i, c] > o[i, best]:
                best = c
        idx[i] = best if best >= 0 else 0
    return out


def fuse_open_targets(const double[:, ::1] p_tilde, const double[:, ::1] o):
    cdef Py_ssize_t n = p_tilde.shape[0], k = p_tilde.shape[1], i, c
    out = np.empty((n, k + 1))
    cdef double[:, ::1] q = out
    cdef double s
    for i in range(n):
        s = 0.0
        for c in range(k):
            q[i, c] = p_tilde[i, c] * o[i, c]
            s += p_tilde[i, c] * (1.0 - o[i, c])
        q[i, k] = s
    return out
