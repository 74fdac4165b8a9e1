"""Pure numpy implementation of the signature kernel.

This is the fallback used when the compiled extension is unavailable
(QUAKESCAN_PURE_PYTHON=1 forces it). It is bit-for-bit identical to the
Cython kernel; all arithmetic is modular uint64.

The hash family is fixed for the life of the on-disk formats:

    fmix64  = 64-bit murmur3 finalizer
    H(x, s) = fmix64(((x + 1) * GOLDEN64) ^ s)

H(., s) is injective for a fixed salt s (odd multiplier, then bijective
mixing), which is what min-wise hashing needs from a random mapping.
"""

import numpy as np

BACKEND_NAME = "python"

GOLDEN64 = 0x9E3779B97F4A7C15

_GOLD = np.uint64(GOLDEN64)
_M1 = np.uint64(0xFF51AFD7ED558CCD)
_M2 = np.uint64(0xC4CEB9FE1A85EC53)
_S33 = np.uint64(33)
_S6 = np.uint64(6)
_S2 = np.uint64(2)
_ONE = np.uint64(1)

# rows per chunk are sized so the (rows, K, F) gather stays around 128 MB
_CHUNK_BUDGET = 16_000_000


def fmix64(x):
    """Murmur3 64-bit finalizer over a uint64 array (returns a new array)."""
    x = np.array(x, dtype=np.uint64, copy=True)
    x ^= x >> _S33
    x *= _M1
    x ^= x >> _S33
    x *= _M2
    x ^= x >> _S33
    return x


def hash_values(x, seed):
    """H(x, seed) for a uint64 array x of element indices."""
    x = np.asarray(x, dtype=np.uint64)
    return fmix64(((x + _ONE) * _GOLD) ^ np.uint64(seed))


def combine_step(acc, w):
    """One boost-style fold of hashed words w into accumulators acc, in place."""
    acc ^= fmix64(w) + _GOLD + (acc << _S6) + (acc >> _S2)
    return acc


def combine(words):
    """Fold a 1-D sequence of uint64 words into a single signature word."""
    acc = np.zeros(1, dtype=np.uint64)
    for w in np.asarray(words, dtype=np.uint64):
        combine_step(acc, w)
    return int(acc[0])


def gen_signatures_range(bits, values, t, k_half, out, start, stop):
    """Signatures for fingerprint rows [start, stop).

    bits   : (n, K) uint32, set-bit indices of each fingerprint
    values : (d, F) uint64 hash mapping, F = t * k_half
    out    : (n, t) uint64, filled in place for the given row range
    """
    K = bits.shape[1]
    F = values.shape[1]
    rows = max(1, _CHUNK_BUDGET // max(1, K * F))
    for c0 in range(start, stop, rows):
        c1 = min(stop, c0 + rows)
        gathered = values[bits[c0:c1]]  # (B, K, F)
        mins = gathered.min(axis=1).reshape(c1 - c0, t, k_half)
        maxes = gathered.max(axis=1).reshape(c1 - c0, t, k_half)
        acc = np.zeros((c1 - c0, t), dtype=np.uint64)
        for j in range(k_half):
            combine_step(acc, mins[:, :, j])
        for j in range(k_half):
            combine_step(acc, maxes[:, :, j])
        out[c0:c1] = acc
