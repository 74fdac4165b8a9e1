# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled signature kernel.

Same contract and bit-identical output as _sigcore_py.gen_signatures_range.
The hot loop is element-major: each set bit of a fingerprint touches one
contiguous row of the hash mapping, updating all t * k/2 running minima and
maxima in a single pass (cache-friendly, as opposed to iterating hash
functions in the outer loop). The GIL is released so callers can run row
ranges on a thread pool.
"""

from libc.stdlib cimport free, malloc
from libc.stdint cimport uint32_t, uint64_t

BACKEND_NAME = "cython"


cdef inline uint64_t _fmix64(uint64_t x) nogil:
    x ^= x >> 33
    x *= <uint64_t>0xFF51AFD7ED558CCD
    x ^= x >> 33
    x *= <uint64_t>0xC4CEB9FE1A85EC53
    x ^= x >> 33
    return x


cdef inline uint64_t _combine1(uint64_t acc, uint64_t w) nogil:
    return acc ^ (_fmix64(w) + <uint64_t>0x9E3779B97F4A7C15
                  + (acc << 6) + (acc >> 2))


def gen_signatures_range(const uint32_t[:, ::1] bits,
                         const uint64_t[:, ::1] values,
                         int t, int k_half,
                         uint64_t[:, ::1] out,
                         Py_ssize_t start, Py_ssize_t stop):
    """Fill out[start:stop] with t-word Min-Max signatures of bits[start:stop]."""
    cdef Py_ssize_t K = bits.shape[1]
    cdef Py_ssize_t F = values.shape[1]
    cdef Py_ssize_t row, kk, f, i, j, base
    cdef uint32_t x
    cdef uint64_t v, acc
    cdef const uint64_t *vrow
    cdef uint64_t *mn
    cdef uint64_t *mx

    if F != t * k_half:
        raise ValueError("mapping width does not match t * k_half")
    if K < 1:
        raise ValueError("fingerprints must have at least one set bit")

    mn = <uint64_t *>malloc(F * sizeof(uint64_t))
    mx = <uint64_t *>malloc(F * sizeof(uint64_t))
    if mn == NULL or mx == NULL:
        free(mn)
        free(mx)
        raise MemoryError()

    try:
        with nogil:
            for row in range(start, stop):
                vrow = &values[bits[row, 0], 0]
                for f in range(F):
                    mn[f] = vrow[f]
                    mx[f] = vrow[f]
                for kk in range(1, K):
                    x = bits[row, kk]
                    vrow = &values[x, 0]
                    for f in range(F):
                        v = vrow[f]
                        if v < mn[f]:
                            mn[f] = v
                        if v > mx[f]:
                            mx[f] = v
                for i in range(t):
                    base = i * k_half
                    acc = 0
                    for j in range(k_half):
                        acc = _combine1(acc, mn[base + j])
                    for j in range(k_half):
                        acc = _combine1(acc, mx[base + j])
                    out[row, i] = acc
    finally:
        free(mn)
        free(mx)
