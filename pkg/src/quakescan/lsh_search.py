"""LSH similarity search over Min-Max signatures.

Signatures are grouped into t single-word hash tables. Two fingerprints whose
Jaccard similarity is s agree on one signature word with probability s**k,
so the number of matching tables follows Binomial(t, s**k); a pair is
reported when at least min_matches tables agree. The resulting S-curve is
detection_probability().

Search runs over index partitions: only one partition of signatures is
resident in tables at a time, and every fingerprint queries each partition.
A pair (a, b) with a < b is emitted exactly once, by the pass whose tables
hold a, as the triplet (dt = b - a, idx1 = a, sim = matching tables). The
emitted set is identical for any partition count; only peak table memory
changes.

The optional occurrence filter runs per partition before emission: a first
pass counts each partition member's within-partition matches, members whose
degree exceeds occurrence_threshold * partition_size (repeating noise hits
a large fraction of its partition) are excluded together with their matched
neighbors, and the frozen exclusion set suppresses emission in this and all
later partitions.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _container
from .errors import ConsistencyError, CorruptInputError, ParameterError
from .fingerprint import FingerprintSet
from .minmax_hash import HashMapping, gen_hash_mapping, signatures

TRI_MAGIC = b"QSTR0001"
_TRI_KIND = "triplet"

TRIPLET_DTYPE = np.dtype([("dt", "<u8"), ("idx1", "<u8"), ("sim", "<u4")])

# (hash_funcs, min_matches) presets; 'optimized' trades more selective
# signature words for a lower table-count threshold
PROFILES = {"baseline": (6, 5), "optimized": (8, 2)}


@dataclass
class SearchConfig:
    tables: int = 100
    hash_funcs: int = 6
    min_matches: int = 5
    seed: int = 0
    partitions: int = 1
    near_repeat_exclusion_s: float | None = None  # None -> window length
    occurrence_threshold: float | None = None

    def validate(self) -> None:
        if self.tables < 1:
            raise ParameterError("tables must be >= 1")
        if self.hash_funcs < 2 or self.hash_funcs % 2:
            raise ParameterError("hash_funcs must be a positive even number")
        if not 1 <= self.min_matches <= self.tables:
            raise ParameterError("min_matches must be in [1, tables]")
        if self.partitions < 1:
            raise ParameterError("partitions must be >= 1")
        if self.occurrence_threshold is not None and not 0 < self.occurrence_threshold <= 1:
            raise ParameterError("occurrence_threshold must be in (0, 1]")
        if self.near_repeat_exclusion_s is not None and self.near_repeat_exclusion_s < 0:
            raise ParameterError("near_repeat_exclusion_s must be >= 0")


@dataclass
class SearchStats:
    n_fingerprints: int = 0
    n_queries: int = 0
    partitions: list = field(default_factory=list)
    lookups_total: int = 0
    distinct_pairs: int = 0
    emitted_triplets: int = 0
    filtered_fingerprints: int = 0
    peak_table_entries: int = 0
    n_buckets: int = 0
    top_bucket_mass: float = 0.0  # share of entries in the largest 0.1% buckets
    max_bucket: int = 0

    @property
    def lookups_per_query(self) -> float:
        return self.lookups_total / self.n_queries if self.n_queries else 0.0

    @property
    def selectivity(self) -> float:
        """Mean fraction of the dataset compared per query."""
        n = self.n_fingerprints
        return 2.0 * self.distinct_pairs / (n * n) if n else 0.0

    def to_dict(self) -> dict:
        return {
            "n_fingerprints": self.n_fingerprints,
            "n_queries": self.n_queries,
            "partitions": [[int(a), int(b)] for a, b in self.partitions],
            "lookups_total": int(self.lookups_total),
            "lookups_per_query": self.lookups_per_query,
            "distinct_pairs": int(self.distinct_pairs),
            "selectivity": self.selectivity,
            "emitted_triplets": int(self.emitted_triplets),
            "filtered_fingerprints": int(self.filtered_fingerprints),
            "peak_table_entries": int(self.peak_table_entries),
            "n_buckets": int(self.n_buckets),
            "top_bucket_mass": self.top_bucket_mass,
            "max_bucket": int(self.max_bucket),
        }


def detection_probability(s: float, k: int, m: int, t: int) -> float:
    """P(a pair with Jaccard s matches in >= m of t tables), p = s**k.

    Upper binomial tail evaluated in log space; absolute accuracy is far
    inside 1e-12 for t up to a few thousand.
    """
    if not 0.0 <= s <= 1.0:
        raise ParameterError("similarity must be in [0, 1]")
    if k < 1 or t < 1 or not 1 <= m <= t:
        raise ParameterError("need k >= 1 and 1 <= m <= t")
    p = s**k
    if p <= 0.0:
        return 0.0
    if p >= 1.0:
        return 1.0
    log_p = k * math.log(s)
    log_q = math.log1p(-p)
    lg_t = math.lgamma(t + 1)
    terms = []
    for i in range(m, t + 1):
        terms.append(lg_t - math.lgamma(i + 1) - math.lgamma(t - i + 1)
                     + i * log_p + (t - i) * log_q)
    top = max(terms)
    total = sum(math.exp(x - top) for x in terms)
    return min(1.0, math.exp(top) * total)


def partition_bounds(n: int, partitions: int) -> list[tuple[int, int]]:
    """Split [0, n) into near-even contiguous index ranges."""
    if partitions < 1:
        raise ParameterError("partitions must be >= 1")
    edges = np.linspace(0, n, min(partitions, max(1, n)) + 1, dtype=int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _gather_ranges(starts: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Concatenate arange(start, start+length) for every row, vectorized."""
    total = int(lengths.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    ends = np.cumsum(lengths)
    offsets = np.repeat(starts - np.concatenate(([0], ends[:-1])), lengths)
    return np.arange(total, dtype=np.int64) + offsets


def _build_tables(sigs: np.ndarray, members: np.ndarray):
    """Per table: signature words of `members` sorted, plus their indices."""
    tables = []
    for ti in range(sigs.shape[1]):
        col = sigs[members, ti]
        order = np.argsort(col, kind="stable")
        tables.append((col[order], members[order]))
    return tables


def _bucket_sizes(sorted_col: np.ndarray) -> np.ndarray:
    if sorted_col.size == 0:
        return np.empty(0, dtype=np.int64)
    change = np.flatnonzero(sorted_col[1:] != sorted_col[:-1])
    edges = np.concatenate(([0], change + 1, [sorted_col.size]))
    return np.diff(edges)


def _collect_pairs(sigs, tables, queries, excl_windows, excluded,
                   canonical: bool, stats: SearchStats | None):
    """Scan tables for candidate pairs of `queries`.

    Returns (q_idx, c_idx, n_tables_matched) for distinct pairs, already
    filtered for self-hits, near repeats, and the exclusion mask. canonical
    restricts to c < q (every unordered pair once).
    """
    keys = []
    for ti, (col_sorted, members_sorted) in enumerate(tables):
        qsig = sigs[queries, ti]
        lo = np.searchsorted(col_sorted, qsig, side="left")
        hi = np.searchsorted(col_sorted, qsig, side="right")
        reps = hi - lo
        pos = _gather_ranges(lo, reps)
        qi = np.repeat(queries, reps)
        ci = members_sorted[pos]
        nonself = ci != qi
        if stats is not None:
            stats.lookups_total += int(nonself.sum())
        if canonical:
            mask = ci < qi
        else:
            mask = nonself
        dt_ok = np.abs(qi.astype(np.int64) - ci.astype(np.int64)) > excl_windows
        mask &= dt_ok
        if excluded is not None:
            mask &= ~excluded[ci]
        qi, ci = qi[mask], ci[mask]
        keys.append((qi.astype(np.uint64) << np.uint64(32)) | ci.astype(np.uint64))
    if keys:
        allkeys = np.concatenate(keys)
    else:
        allkeys = np.empty(0, dtype=np.uint64)
    if allkeys.size == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0, dtype=np.uint32)
    allkeys.sort(kind="stable")
    change = np.flatnonzero(allkeys[1:] != allkeys[:-1])
    starts = np.concatenate(([0], change + 1))
    counts = np.diff(np.concatenate((starts, [allkeys.size]))).astype(np.uint32)
    uniq = allkeys[starts]
    q_idx = (uniq >> np.uint64(32)).astype(np.int64)
    c_idx = (uniq & np.uint64(0xFFFFFFFF)).astype(np.int64)
    return q_idx, c_idx, counts


def search_signatures(sigs: np.ndarray, cfg: SearchConfig,
                      exclusion_windows: int = 0):
    """Find similar pairs among an (n, t) signature matrix.

    Returns (triplets, stats): triplets is a TRIPLET_DTYPE record array
    sorted by (dt, idx1). exclusion_windows suppresses pairs of nearby
    window indices (|idx2 - idx1| <= exclusion_windows).
    """
    cfg.validate()
    sigs = np.ascontiguousarray(sigs, dtype=np.uint64)
    if sigs.ndim != 2 or sigs.shape[1] != cfg.tables:
        raise ParameterError("signature matrix does not match cfg.tables")
    n = sigs.shape[0]
    if n >= 2**32:
        raise ParameterError("more than 2**32 fingerprints are not supported")
    stats = SearchStats(n_fingerprints=n)
    bounds = partition_bounds(n, cfg.partitions) if n else []
    stats.partitions = bounds
    excluded = np.zeros(n, dtype=bool) if cfg.occurrence_threshold is not None else None
    bucket_sizes = []
    out_chunks = []
    all_idx = np.arange(n, dtype=np.int64)
    for lo, hi in bounds:
        members = np.arange(lo, hi, dtype=np.int64)
        if excluded is not None:
            members = members[~excluded[lo:hi]]
        if members.size == 0:
            continue
        tables = _build_tables(sigs, members)
        stats.peak_table_entries = max(stats.peak_table_entries,
                                       members.size * cfg.tables)
        for col_sorted, _ in tables:
            bucket_sizes.append(_bucket_sizes(col_sorted))

        if cfg.occurrence_threshold is not None:
            # pass 1: within-partition degrees over matched pairs
            q_idx, c_idx, counts = _collect_pairs(
                sigs, tables, members, exclusion_windows, None,
                canonical=True, stats=None)
            matched = counts >= cfg.min_matches
            mq, mc = q_idx[matched], c_idx[matched]
            degree = np.zeros(n, dtype=np.int64)
            np.add.at(degree, mq, 1)
            np.add.at(degree, mc, 1)
            limit = cfg.occurrence_threshold * members.size
            core = degree > limit
            if core.any():
                new_excl = core.copy()
                touch = core[mq] | core[mc]
                new_excl[mq[touch]] = True
                new_excl[mc[touch]] = True
                stats.filtered_fingerprints += int((new_excl & ~excluded).sum())
                excluded |= new_excl

        queries = all_idx if excluded is None else all_idx[~excluded]
        q_idx, c_idx, counts = _collect_pairs(
            sigs, tables, queries, exclusion_windows, excluded,
            canonical=True, stats=stats)
        stats.distinct_pairs += int(q_idx.size)
        keep = counts >= cfg.min_matches
        if keep.any():
            rec = np.empty(int(keep.sum()), dtype=TRIPLET_DTYPE)
            rec["dt"] = (q_idx[keep] - c_idx[keep]).astype(np.uint64)
            rec["idx1"] = c_idx[keep].astype(np.uint64)
            rec["sim"] = counts[keep]
            out_chunks.append(rec)
    stats.n_queries = n if excluded is None else int(n - excluded.sum())
    if out_chunks:
        triplets = np.concatenate(out_chunks)
        order = np.lexsort((triplets["idx1"], triplets["dt"]))
        triplets = triplets[order]
    else:
        triplets = np.empty(0, dtype=TRIPLET_DTYPE)
    stats.emitted_triplets = int(triplets.size)
    if bucket_sizes:
        sizes = np.concatenate(bucket_sizes)
        stats.n_buckets = int(sizes.size)
        stats.max_bucket = int(sizes.max()) if sizes.size else 0
        top = max(1, int(math.ceil(0.001 * sizes.size)))
        largest = np.partition(sizes, sizes.size - top)[sizes.size - top:]
        stats.top_bucket_mass = float(largest.sum() / sizes.sum())
    return triplets, stats


def exclusion_windows_for(fps: FingerprintSet, cfg: SearchConfig) -> int:
    """Near-repeat suppression radius in window-index units."""
    excl_s = cfg.near_repeat_exclusion_s
    if excl_s is None:
        excl_s = fps.window_len_s
    return int(math.ceil(excl_s / fps.window_lag_s)) if excl_s > 0 else 0


def search_fingerprints(fps: FingerprintSet, cfg: SearchConfig,
                        mapping: HashMapping | None = None,
                        workers: int = 1):
    """Signature generation plus similarity search for one channel.

    Returns (triplets, stats, mapping). Fingerprint rows must be
    consecutive windows (triplet dt counts rows); the mapping is derived
    from cfg.seed unless one is passed in.
    """
    cfg.validate()
    if mapping is None:
        mapping = gen_hash_mapping(fps.d, cfg.tables, cfg.hash_funcs, cfg.seed)
    if (mapping.t, mapping.k) != (cfg.tables, cfg.hash_funcs):
        raise ConsistencyError("hash mapping does not match search config")
    if mapping.d != fps.d:
        raise ConsistencyError("hash mapping dimensionality does not match fingerprints")
    sigs = signatures(fps.bits, mapping, workers=workers)
    triplets, stats = search_signatures(
        sigs, cfg, exclusion_windows=exclusion_windows_for(fps, cfg))
    return triplets, stats, mapping


# ---------------------------------------------------------------------------
# triplet files

def write_triplet_file(path, triplets: np.ndarray, header: dict) -> None:
    """Binary triplet file; records sorted by (dt, idx1) as given."""
    triplets = np.asarray(triplets, dtype=TRIPLET_DTYPE)
    with open(path, "wb") as f:
        _container.write_preamble(f, TRI_MAGIC, header, count=triplets.size)
        triplets.tofile(f)


def read_triplet_file(path):
    """Read a binary triplet file -> (records, header)."""
    with open(path, "rb") as f:
        header, count, off = _container.read_preamble(f, TRI_MAGIC, _TRI_KIND)
        size = os.fstat(f.fileno()).st_size
        _container.check_payload_size(size, off, count,
                                      TRIPLET_DTYPE.itemsize, _TRI_KIND)
        rec = np.fromfile(f, dtype=TRIPLET_DTYPE, count=count)
    if rec.size and int(rec["dt"].min()) < 1:
        raise CorruptInputError("triplet with non-positive dt")
    return rec, header


def iter_triplet_batches(path, start: int = 0, stop: int | None = None,
                         batch: int = 1 << 16):
    """Yield record batches from a triplet file, rows [start, stop)."""
    with open(path, "rb") as f:
        _, count, off = _container.read_preamble(f, TRI_MAGIC, _TRI_KIND)
        size = os.fstat(f.fileno()).st_size
        _container.check_payload_size(size, off, count,
                                      TRIPLET_DTYPE.itemsize, _TRI_KIND)
        stop = count if stop is None else min(stop, count)
        pos = max(0, start)
        f.seek(off + pos * TRIPLET_DTYPE.itemsize)
        while pos < stop:
            n = min(batch, stop - pos)
            rec = np.fromfile(f, dtype=TRIPLET_DTYPE, count=n)
            if rec.size < n:
                raise CorruptInputError("triplet file truncated")
            yield rec
            pos += n


def read_triplet_header(path) -> dict:
    with open(path, "rb") as f:
        header, count, _ = _container.read_preamble(f, TRI_MAGIC, _TRI_KIND)
    header["count"] = count
    return header


def write_triplet_csv(path, triplets: np.ndarray) -> None:
    """CSV interchange form: header `dt,idx1,sim`, one triplet per row."""
    triplets = np.asarray(triplets, dtype=TRIPLET_DTYPE)
    with open(path, "w", encoding="utf-8") as f:
        f.write("dt,idx1,sim\n")
        for r in triplets:
            f.write(f"{int(r['dt'])},{int(r['idx1'])},{int(r['sim'])}\n")


def read_triplet_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        head = f.readline().strip()
        if head != "dt,idx1,sim":
            raise CorruptInputError(f"unexpected triplet CSV header {head!r}")
        rows = []
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise CorruptInputError(f"triplet CSV line {line_no} malformed")
            try:
                rows.append(tuple(int(v) for v in parts))
            except ValueError as exc:
                raise CorruptInputError(
                    f"triplet CSV line {line_no}: {exc}") from exc
    rec = np.array(rows, dtype=TRIPLET_DTYPE) if rows \
        else np.empty(0, dtype=TRIPLET_DTYPE)
    return rec
