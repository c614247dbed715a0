# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

NAME = "cython"


def softmax_sgd_epoch(double[:, ::1] W, double[::1] b, const double[:, ::1] X,
                      const long[::1] y, const long[::1] order, Py_ssize_t batch_size,
                      double lr, double l2, double l1, double prox_mu,
                      const double[:, ::1] W0, const double[::1] b0):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t d = W.shape[0]
    cdef Py_ssize_t L = W.shape[1]
    cdef double[:, ::1] gW = np.zeros((d, L))
    cdef double[::1] gb = np.zeros(L)
    cdef double[::1] z = np.zeros(L)
    cdef Py_ssize_t start, stop, m, r, i, j, c
    cdef double zmax, s, inv_m, w, xv
    start = 0
    while start < n:
        stop = start + batch_size
        if stop > n:
            stop = n
        m = stop - start
        inv_m = 1.0 / m
        for j in range(d):
            for c in range(L):
                gW[j, c] = 0.0
        for c in range(L):
            gb[c] = 0.0
        for r in range(start, stop):
            i = order[r]
            for c in range(L):
                z[c] = b[c]
            for j in range(d):
                xv = X[i, j]
                for c in range(L):
                    z[c] += xv * W[j, c]
            zmax = z[0]
            for c in range(1, L):
                if z[c] > zmax:
                    zmax = z[c]
            s = 0.0
            for c in range(L):
                z[c] = exp(z[c] - zmax)
                s += z[c]
            for c in range(L):
                z[c] /= s
            z[y[i]] -= 1.0
            for j in range(d):
                xv = X[i, j]
                for c in range(L):
                    gW[j, c] += xv * z[c]
            for c in range(L):
                gb[c] += z[c]
        for j in range(d):
            for c in range(L):
                w = W[j, c]
                s = gW[j, c] * inv_m + l2 * w
                if w > 0:
                    s += l1
                elif w < 0:
                    s -= l1
                s += prox_mu * (w - W0[j, c])
                W[j, c] = w - lr * s
        for c in range(L):
            s = gb[c] * inv_m + prox_mu * (b[c] - b0[c])
            b[c] -= lr * s
        start = stop


cdef double _UNPACK[256][8]
cdef int _q, _b
for _q in range(256):
    for _b in range(8):
        _UNPACK[_q][_b] = 1.0 if (_q >> _b) & 1 else -1.0


def sign_pack(values, double threshold):
    cdef const double[::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t d = v.shape[0]
    cdef Py_ssize_t nfull = d >> 3
    out = np.zeros((d + 7) // 8, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    cdef Py_ssize_t q, j
    cdef unsigned int acc
    cdef int b
    for q in range(nfull):
        acc = 0
        j = q << 3
        for b in range(8):
            acc |= (<unsigned int>(v[j + b] >= threshold)) << b
        o[q] = <unsigned char>acc
    if d & 7:
        acc = 0
        j = nfull << 3
        for b in range(d - j):
            acc |= (<unsigned int>(v[j + b] >= threshold)) << b
        o[nfull] = <unsigned char>acc
    return out


def unpack_signs(packed, Py_ssize_t d):
    cdef const unsigned char[::1] p = np.ascontiguousarray(packed, dtype=np.uint8)
    out = np.empty(d, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t nfull = d >> 3
    cdef Py_ssize_t q, j
    cdef int b
    for q in range(nfull):
        j = q << 3
        for b in range(8):
            o[j + b] = _UNPACK[p[q]][b]
    j = nfull << 3
    for b in range(d - j):
        o[j + b] = _UNPACK[p[nfull]][b]
    return out


def sum_packed_signs(packed_rows, Py_ssize_t d):
    cdef const unsigned char[:, ::1] p = np.ascontiguousarray(packed_rows, dtype=np.uint8)
    cdef Py_ssize_t K = p.shape[0]
    cdef Py_ssize_t nb = p.shape[1]
    counts = np.zeros(nb * 8, dtype=np.int32)
    cdef int[::1] cnt = counts
    cdef Py_ssize_t k, q, j
    cdef unsigned int byte
    cdef int b
    for k in range(K):
        for q in range(nb):
            byte = p[k, q]
            j = q << 3
            for b in range(8):
                cnt[j + b] += (byte >> b) & 1
    out = np.empty(d, dtype=np.int64)
    cdef long[::1] o = out
    for j in range(d):
        o[j] = 2 * cnt[j] - K
    return out
