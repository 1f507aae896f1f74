# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics mirror ``dotfactor._pykernels`` exactly."""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, fabs, log1p, sqrt, sqrtf
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix64_fill(uint64_t key, uint64_t start, Py_ssize_t n):
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = _mix(key + (start + <uint64_t>i + 1) * GOLDEN)
    return out


def adam_update(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                floating lr, floating b1, floating b2, floating eps,
                floating bc1, floating bc2):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef floating omb1 = 1 - b1
    cdef floating omb2 = 1 - b2
    cdef floating gi, mh, vh, den, step
    with nogil:
        for i in range(n):
            gi = g[i]
            m[i] = b1 * m[i] + omb1 * gi
            v[i] = b2 * v[i] + omb2 * (gi * gi)
            mh = m[i] / bc1
            vh = v[i] / bc2
            if floating is float:
                den = sqrtf(vh) + eps
            else:
                den = sqrt(vh) + eps
            step = lr * mh
            p[i] = p[i] - step / den


def bce_logits(floating[:, ::1] logits, floating[:, ::1] target):
    cdef Py_ssize_t b, j, nb = logits.shape[0], npx = logits.shape[1]
    loss = np.empty(nb, dtype=np.float64)
    grad = np.empty_like(np.asarray(logits))
    cdef double[::1] lo = loss
    cdef floating[:, ::1] gr = grad
    cdef double acc, l, t, e
    with nogil:
        for b in range(nb):
            acc = 0.0
            for j in range(npx):
                l = logits[b, j]
                t = target[b, j]
                e = exp(-fabs(l))
                acc += (l if l > 0 else 0.0) - t * l + log1p(e)
                if l >= 0:
                    gr[b, j] = <floating>(1.0 / (1.0 + e) - t)
                else:
                    gr[b, j] = <floating>(e / (1.0 + e) - t)
            lo[b] = acc
    return loss, grad


def joint_counts(const int64_t[::1] a, const int64_t[::1] b, Py_ssize_t na, Py_ssize_t nb):
    out = np.zeros((na, nb), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    cdef Py_ssize_t i, n = a.shape[0]
    with nogil:
        for i in range(n):
            o[a[i], b[i]] += 1
    return out
