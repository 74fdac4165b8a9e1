"""Min-Max hash signatures for sparse binary fingerprints.

A fingerprint (set of bit indices in [0, d)) is summarized by t signature
words. Each word is built from k hash functions: k/2 random mappings whose
minimum over the set bits is kept, and the same k/2 mappings' maximum.
Keeping both extremes halves the number of mappings evaluated per function
while preserving the MinHash collision property, so two fingerprints with
Jaccard similarity s agree on a signature word with probability s**k.

The kernel that computes signatures exists twice: a compiled Cython core and
a pure numpy fallback with identical output. The compiled core is preferred
automatically; set QUAKESCAN_PURE_PYTHON=1 to force the fallback.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _container, _sigcore_py
from .errors import ConsistencyError, ParameterError

if os.environ.get("QUAKESCAN_PURE_PYTHON"):
    _core = _sigcore_py
else:
    try:
        from . import _sigcore as _core
    except ImportError:
        _core = _sigcore_py

BACKEND = _core.BACKEND_NAME

GOLDEN64 = _sigcore_py.GOLDEN64
fmix64 = _sigcore_py.fmix64
hash_values = _sigcore_py.hash_values
combine = _sigcore_py.combine

SIG_MAGIC = b"QSSG0001"
_SIG_KIND = "signature"


def backend_name(pure_python: bool | None = None) -> str:
    """Name of the signature kernel in use ('cython' or 'python')."""
    if pure_python is None:
        return BACKEND
    return _sigcore_py.BACKEND_NAME if pure_python else _core.BACKEND_NAME


@dataclass
class HashMapping:
    """t * k/2 random mappings from element index to uint64.

    values[x, j] = H(x, seed + j); row x holds every hash of element x so the
    signature kernel reads one contiguous row per set bit.
    """

    d: int
    t: int
    k: int
    seed: int
    values: np.ndarray = field(repr=False)

    @property
    def k_half(self) -> int:
        return self.k // 2

    @property
    def n_funcs(self) -> int:
        return self.t * self.k_half


def gen_hash_mapping(d: int, t: int, k: int, seed: int) -> HashMapping:
    """Generate the hash mapping table for a (d, t, k) configuration.

    k must be even: each signature word uses k/2 minima and k/2 maxima.
    """
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    if k < 2 or k % 2 != 0:
        raise ParameterError(f"k must be a positive even number, got {k}")
    if not 0 <= seed < 2**64:
        raise ParameterError("seed must fit in uint64")
    n_funcs = t * (k // 2)
    base = (np.arange(d, dtype=np.uint64) + np.uint64(1)) * np.uint64(GOLDEN64)
    salts = np.uint64(seed) + np.arange(n_funcs, dtype=np.uint64)
    values = fmix64(base[:, None] ^ salts[None, :])
    return HashMapping(d=d, t=t, k=k, seed=seed, values=values)


def signatures(bits, mapping: HashMapping, workers: int = 1) -> np.ndarray:
    """Min-Max signatures of a batch of fingerprints.

    bits is an (n, K) array of set-bit indices (order within a row does not
    matter); the result is an (n, t) uint64 array. workers > 1 splits rows
    across a thread pool; the compiled kernel releases the GIL so this scales
    with cores.
    """
    bits = np.ascontiguousarray(bits, dtype=np.uint32)
    if bits.ndim != 2:
        raise ParameterError("bits must be a 2-D (n, K) array")
    n, K = bits.shape
    if K < 1:
        raise ParameterError("fingerprints must have at least one set bit")
    if n and int(bits.max()) >= mapping.d:
        raise ParameterError("fingerprint bit index out of range for mapping")
    out = np.empty((n, mapping.t), dtype=np.uint64)
    if n == 0:
        return out
    values = np.ascontiguousarray(mapping.values, dtype=np.uint64)
    workers = max(1, int(workers))
    if workers == 1 or n < 2 * workers:
        _core.gen_signatures_range(bits, values, mapping.t, mapping.k_half,
                                   out, 0, n)
        return out
    bounds = np.linspace(0, n, workers + 1, dtype=int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [
            pool.submit(_core.gen_signatures_range, bits, values, mapping.t,
                        mapping.k_half, out, int(lo), int(hi))
            for lo, hi in zip(bounds[:-1], bounds[1:])
            if hi > lo
        ]
        for fut in futs:
            fut.result()
    return out


def write_signature_file(path, sigs: np.ndarray, mapping: HashMapping,
                         extra: dict | None = None) -> None:
    """Write an (n, t) signature matrix with its configuration header."""
    sigs = np.ascontiguousarray(sigs, dtype=np.uint64)
    if sigs.ndim != 2 or sigs.shape[1] != mapping.t:
        raise ParameterError("signature matrix shape does not match mapping")
    header = {
        "d": mapping.d,
        "t": mapping.t,
        "k": mapping.k,
        "k_half": mapping.k_half,
        "seed": mapping.seed,
    }
    if extra:
        header.update(extra)
    with open(path, "wb") as f:
        _container.write_preamble(f, SIG_MAGIC, header, count=sigs.shape[0])
        f.write(sigs.tobytes())


def read_signature_file(path):
    """Read a signature file, returning ((n, t) uint64 array, header dict)."""
    with open(path, "rb") as f:
        header, count, off = _container.read_preamble(f, SIG_MAGIC, _SIG_KIND)
        for key in ("t", "k", "seed", "d"):
            if key not in header:
                raise ConsistencyError(f"signature header missing '{key}'")
        t = int(header["t"])
        size = os.fstat(f.fileno()).st_size
        _container.check_payload_size(size, off, count, 8 * t, _SIG_KIND)
        sigs = np.fromfile(f, dtype="<u8", count=count * t).reshape(count, t)
    return sigs, header


def read_signature_header(path) -> dict:
    with open(path, "rb") as f:
        header, count, _ = _container.read_preamble(f, SIG_MAGIC, _SIG_KIND)
    header["count"] = count
    return header
