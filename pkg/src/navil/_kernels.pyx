# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fixed-order matmul and row sums.

Every output element is accumulated as ``((0 + a[i,0]b[0,j]) + a[i,1]b[1,j]) + ...``
so results are bitwise identical to a naive triple loop. The extension must be
built with ``-ffp-contract=off``; fused multiply-add would change the rounding.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef void _mm(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double aik
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] = out[i, j] + aik * b[k, j]


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape[1]} vs {b.shape[0]}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        _mm(a, b, o)
    return out


def bmm(const double[:, :, ::1] a, const double[:, :, ::1] b):
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError("bmm shape mismatch")
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t t
    with nogil:
        for t in range(a.shape[0]):
            _mm(a[t], b[t], o[t])
    return out


def rowsum(const double[:, ::1] x):
    """Left-to-right sum of each row; trailing zeros leave the result unchanged."""
    out = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j, n = x.shape[1]
    cdef double acc
    with nogil:
        for i in range(x.shape[0]):
            acc = 0.0
            for j in range(n):
                acc = acc + x[i, j]
            o[i] = acc
    return out
