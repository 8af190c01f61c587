# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the CKA / block-structure hot paths."""
import numpy as np

def trace_product(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef Py_ssize_t i, j, i0, j0, i1, j1
    cdef Py_ssize_t tile = 64
    cdef double s = 0.0
    with nogil:
        # tiled so the transposed reads of b stay in cache
        i0 = 0
        while i0 < n:
            i1 = min(i0 + tile, n)
            j0 = 0
            while j0 < m:
                j1 = min(j0 + tile, m)
                for i in range(i0, i1):
                    for j in range(j0, j1):
                        s += a[i, j] * b[j, i]
                j0 += tile
            i0 += tile
    return s


def frobenius_sq(const double[:, ::1] a):
    cdef Py_ssize_t i, j
    cdef double s = 0.0, v
    with nogil:
        for i in range(a.shape[0]):
            for j in range(a.shape[1]):
                v = a[i, j]
                s += v * v
    return s


def center_gram(const double[:, ::1] k):
    cdef Py_ssize_t n = k.shape[0], i, j
    out = np.empty((n, n), dtype=np.float64)
    row_np = np.zeros(n, dtype=np.float64)
    col_np = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] row = row_np
    cdef double[::1] col = col_np
    cdef double total = 0.0, grand, v
    with nogil:
        for i in range(n):
            for j in range(n):
                v = k[i, j]
                row[i] += v
                col[j] += v
        for i in range(n):
            total += row[i]
            row[i] /= n
            col[i] /= n
        grand = total / (<double>n * n)
        for i in range(n):
            for j in range(n):
                o[i, j] = k[i, j] - row[i] - col[j] + grand
    return out


def block_profile(const double[:, ::1] m):
    cdef Py_ssize_t n = m.shape[0], k, i, j
    out_np = np.empty(n - 1, dtype=np.float64)
    cdef double[::1] out = out_np
    cdef double ref = m[0, 1], v, intra, inter
    cdef Py_ssize_t n_intra, n_inter
    cdef bint left_i, left_j
    with nogil:
        for k in range(n - 1):
            intra = 0.0
            inter = 0.0
            n_intra = 0
            n_inter = 0
            for i in range(n):
                left_i = i <= k
                for j in range(n):
                    if i == j:
                        continue
                    v = m[i, j] - ref
                    left_j = j <= k
                    if left_i == left_j:
                        intra += v
                        n_intra += 1
                    else:
                        inter += v
                        n_inter += 1
            if n_intra:
                out[k] = intra / n_intra - inter / n_inter
            else:
                out[k] = -inter / n_inter
    return out_np
