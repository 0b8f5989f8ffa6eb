# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops.  ``_fallback.py`` mirrors every function here and the
two must agree bit for bit (same accumulation order, exact integer distances)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def window_sums(const cnp.int64_t[:, ::1] padded, int num_classes,
                const double[:, ::1] weights):
    """Kernel-weighted class histogram of every window of ``padded``.

    ``out[r, c, k] = sum(weights[i, j] for i, j if padded[r+i, c+j] == k)``,
    accumulated in row-major offset order.
    """
    cdef Py_ssize_t ph = weights.shape[0], pw = weights.shape[1]
    cdef Py_ssize_t h = padded.shape[0] - ph + 1
    cdef Py_ssize_t w = padded.shape[1] - pw + 1
    if h < 1 or w < 1:
        raise ValueError("padded map smaller than the window")
    out = np.zeros((h, w, num_classes), dtype=np.float64)
    cdef double[:, :, ::1] acc = out
    cdef Py_ssize_t r, c, i, j
    cdef cnp.int64_t k
    for r in range(h):
        for c in range(w):
            for i in range(ph):
                for j in range(pw):
                    k = padded[r + i, c + j]
                    if k < 0 or k >= num_classes:
                        raise ValueError("label outside [0, num_classes)")
                    acc[r, c, k] += weights[i, j]
    return out


cdef void _envelope_1d(double* f, Py_ssize_t n, double* d,
                       Py_ssize_t* v, double* z) noexcept nogil:
    # Felzenszwalb-Huttenlocher lower envelope of parabolas; INFINITY = no feature.
    cdef Py_ssize_t q, k = -1, j
    cdef double s
    for q in range(n):
        if f[q] == INFINITY:
            continue
        while k >= 0:
            s = ((f[q] + <double>(q * q)) - (f[v[k]] + <double>(v[k] * v[k]))) / (2.0 * (q - v[k]))
            if s <= z[k]:
                k -= 1
            else:
                break
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -INFINITY
        else:
            k += 1
            v[k] = q
            z[k] = s
        z[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            d[q] = INFINITY
        return
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        d[q] = <double>((q - v[j]) * (q - v[j])) + f[v[j]]


def distance_to_mask(const cnp.uint8_t[:, ::1] mask):
    """Euclidean distance from every pixel to the nearest nonzero pixel of
    ``mask`` (``inf`` everywhere when the mask is empty)."""
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1], r, c
    cdef Py_ssize_t n = h if h > w else w
    sq = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] g = sq
    f_arr = np.empty(n, dtype=np.float64)
    d_arr = np.empty(n, dtype=np.float64)
    z_arr = np.empty(n + 1, dtype=np.float64)
    v_arr = np.empty(n, dtype=np.intp)
    cdef double[::1] f = f_arr, d = d_arr, z = z_arr
    cdef Py_ssize_t[::1] v = v_arr
    with nogil:
        for c in range(w):
            for r in range(h):
                f[r] = 0.0 if mask[r, c] else INFINITY
            _envelope_1d(&f[0], h, &d[0], &v[0], &z[0])
            for r in range(h):
                g[r, c] = d[r]
        for r in range(h):
            for c in range(w):
                f[c] = g[r, c]
            _envelope_1d(&f[0], w, &d[0], &v[0], &z[0])
            for c in range(w):
                g[r, c] = sqrt(d[c])
    return sq
