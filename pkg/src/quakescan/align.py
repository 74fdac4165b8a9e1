"""Cross-channel combination, pair clustering, and network association.

Triplet streams (dt, idx1, sim) sorted by (dt, idx1) are summed across
the channels of a station, clustered into diagonal streaks in
(idx1, dt) space, reduced to per-station candidate event pairs, and
finally associated across stations into ranked network detections.

Clustering is streaming: records arrive in (dt, idx1) order and two
triplets are adjacent only when their dt rows differ by at most one, so
a cluster can stop growing as soon as the scan passes its newest row.
Memory stays bounded by the width of one dt row regardless of file
size. For the same reason a file may be split wherever consecutive
records jump by two or more dt rows and the pieces clustered
independently; the concatenated result is identical to a serial pass.
"""

from __future__ import annotations

import bisect
import heapq
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _container
from .errors import ConsistencyError, ParameterError
from .lsh_search import (
    TRI_MAGIC,
    TRIPLET_DTYPE,
    iter_triplet_batches,
    read_triplet_header,
)

_TRI_KIND = "triplet"
_WRITE_BATCH = 1 << 16


# ---------------------------------------------------------------------------
# sorted triplet streams and channel combination


def _tuple_stream(path, start: int = 0, stop: int | None = None):
    """Yield (dt, idx1, sim) int tuples, checking (dt, idx1) sort order."""
    prev_dt = prev_i1 = -1
    for rec in iter_triplet_batches(path, start, stop):
        dt = rec["dt"].astype(np.int64)
        i1 = rec["idx1"].astype(np.int64)
        ddt = np.diff(dt)
        bad = (ddt < 0) | ((ddt == 0) & (np.diff(i1) < 0))
        if bad.any() or (dt[0], i1[0]) < (prev_dt, prev_i1):
            raise ConsistencyError(f"{path}: triplets not sorted by (dt, idx1)")
        prev_dt, prev_i1 = int(dt[-1]), int(i1[-1])
        yield from zip(dt.tolist(), i1.tolist(), rec["sim"].tolist())


class _TripletWriter:
    """Buffered triplet-file writer; record count is patched on close."""

    def __init__(self, path, header: dict):
        self.f = open(path, "wb")
        _container.write_preamble(self.f, TRI_MAGIC, header, count=0)
        self.rows: list[tuple[int, int, int]] = []
        self.n = 0

    def add(self, dt: int, idx1: int, sim: int) -> None:
        self.rows.append((dt, idx1, sim))
        if len(self.rows) >= _WRITE_BATCH:
            self.flush()

    def flush(self) -> None:
        if self.rows:
            np.array(self.rows, dtype=TRIPLET_DTYPE).tofile(self.f)
            self.n += len(self.rows)
            self.rows.clear()

    def close(self) -> int:
        self.flush()
        _container.patch_count(self.f, self.n)
        self.f.close()
        return self.n


def sort_triplet_file(src, dst, header: dict,
                      chunk_records: int = 2_000_000) -> int:
    """External sort of a triplet file by (dt, idx1); returns record count.

    Chunks are sorted in memory and spilled as raw runs, then k-way
    merged, so peak memory is one chunk regardless of file size.
    """
    if chunk_records < 1:
        raise ParameterError("chunk_records must be >= 1")
    with tempfile.TemporaryDirectory(prefix="qs_sort_") as td:
        runs = []
        for rec in iter_triplet_batches(src, batch=chunk_records):
            rec = rec[np.lexsort((rec["idx1"], rec["dt"]))]
            run_path = os.path.join(td, f"run{len(runs)}.bin")
            rec.tofile(run_path)
            runs.append(run_path)

        def run_stream(path):
            rec = np.fromfile(path, dtype=TRIPLET_DTYPE)
            return zip(rec["dt"].tolist(), rec["idx1"].tolist(),
                       rec["sim"].tolist())

        out = _TripletWriter(dst, header)
        for dt, i1, sim in heapq.merge(*(run_stream(r) for r in runs)):
            out.add(dt, i1, sim)
        return out.close()


def combine_channel_triplets(paths, dst, threshold: int,
                             header: dict) -> int:
    """Merge per-channel triplet files of one station into one file.

    Matches of the same window pair (dt, idx1) have their table-match
    counts summed across channels; combined pairs below `threshold` are
    dropped. Inputs must be sorted by (dt, idx1); the output is too.
    Returns the number of records written.
    """
    if not paths:
        raise ParameterError("no triplet files to combine")
    if threshold < 1:
        raise ParameterError("threshold must be >= 1")
    out = _TripletWriter(dst, header)
    cur_dt = cur_i1 = -1
    acc = 0
    for dt, i1, sim in heapq.merge(*(_tuple_stream(p) for p in paths)):
        if dt == cur_dt and i1 == cur_i1:
            acc += sim
            continue
        if acc >= threshold:
            out.add(cur_dt, cur_i1, acc)
        cur_dt, cur_i1, acc = dt, i1, sim
    if acc >= threshold:
        out.add(cur_dt, cur_i1, acc)
    return out.close()


# ---------------------------------------------------------------------------
# streaming cluster extraction


@dataclass
class ClusterParams:
    gap: int = 3          # max idx1 spacing between adjacent triplets
    max_width: int = 3    # max dt span a cluster may grow to
    min_size: int = 3     # min triplets per emitted cluster

    def validate(self) -> None:
        if self.gap < 1:
            raise ParameterError("gap must be >= 1")
        if self.max_width < 0:
            raise ParameterError("max_width must be >= 0")
        if self.min_size < 1:
            raise ParameterError("min_size must be >= 1")


@dataclass
class Cluster:
    """A connected streak of matched window pairs at near-constant lag."""

    dt_min: int
    dt_max: int
    idx1_min: int
    idx1_max: int
    pair_count: int
    sim_sum: int
    w_dt: int    # sum of sim * dt, for the centroid
    w_idx: int   # sum of sim * idx1

    @property
    def dt_centroid(self) -> float:
        return self.w_dt / self.sim_sum

    @property
    def idx1_centroid(self) -> float:
        return self.w_idx / self.sim_sum

    def sort_key(self):
        return (self.dt_min, self.idx1_min, self.dt_max, self.idx1_max,
                self.sim_sum, self.pair_count)


class _Active:
    __slots__ = ("cid", "dt_min", "dt_max", "idx1_min", "idx1_max",
                 "pair_count", "sim_sum", "w_dt", "w_idx",
                 "edge", "cur", "last_row")

    def __init__(self, cid, dt, pts):
        self.cid = cid
        self.dt_min = self.dt_max = self.last_row = dt
        self.idx1_min = pts[0][0]
        self.idx1_max = pts[-1][0]
        self.pair_count = len(pts)
        self.sim_sum = sum(s for _, s in pts)
        self.w_dt = dt * self.sim_sum
        self.w_idx = sum(j * s for j, s in pts)
        self.edge: list[int] = []
        self.cur = [j for j, _ in pts]


def _cluster_stream(stream, params: ClusterParams) -> list[Cluster]:
    """Single-pass clustering of (dt, idx1, sim) tuples sorted by (dt, idx1).

    Two triplets are adjacent when their dt differ by at most 1 and their
    idx1 by at most `gap`; clusters are the resulting connected
    components, except that a merge is skipped when it would push the
    cluster's dt span beyond `max_width` (long vertical chains are
    artifacts, real repeats sit at near-constant dt).
    """
    params.validate()
    done: list[Cluster] = []
    actives: dict[int, _Active] = {}
    next_id = 0

    def close(a: _Active) -> None:
        if a.pair_count >= params.min_size:
            done.append(Cluster(a.dt_min, a.dt_max, a.idx1_min, a.idx1_max,
                                a.pair_count, a.sim_sum, a.w_dt, a.w_idx))

    def flush_row(row_dt: int, pts: list[tuple[int, int]]) -> None:
        nonlocal next_id
        for cid in [c for c, a in actives.items() if a.last_row < row_dt - 1]:
            close(actives.pop(cid))
        # sorted prev-row membership for interval candidate lookups
        edge: list[tuple[int, int]] = []
        for a in actives.values():
            edge.extend((j, a.cid) for j in a.edge)
        edge.sort()
        ejs = [j for j, _ in edge]
        parent = {cid: cid for cid in actives}

        def find(c: int) -> int:
            while parent[c] != c:
                parent[c] = parent[parent[c]]
                c = parent[c]
            return c

        i = 0
        while i < len(pts):
            j0 = i
            while i + 1 < len(pts) and pts[i + 1][0] - pts[i][0] <= params.gap:
                i += 1
            run = pts[j0:i + 1]
            i += 1
            a = _Active(next_id, row_dt, run)
            next_id += 1
            actives[a.cid] = a
            parent[a.cid] = a.cid
            # a prev-row point within gap of any run point lies in this
            # interval, because gaps inside the run never exceed `gap`
            lo = bisect.bisect_left(ejs, run[0][0] - params.gap)
            hi = bisect.bisect_right(ejs, run[-1][0] + params.gap)
            roots = {find(edge[k][1]) for k in range(lo, hi)}
            roots.discard(a.cid)
            for cid in sorted(roots, key=lambda c: (actives[c].dt_min,
                                                    actives[c].idx1_min, c)):
                b = actives[cid]
                if row_dt - min(a.dt_min, b.dt_min) > params.max_width:
                    continue
                a.dt_min = min(a.dt_min, b.dt_min)
                a.idx1_min = min(a.idx1_min, b.idx1_min)
                a.idx1_max = max(a.idx1_max, b.idx1_max)
                a.pair_count += b.pair_count
                a.sim_sum += b.sim_sum
                a.w_dt += b.w_dt
                a.w_idx += b.w_idx
                a.cur.extend(b.cur)
                parent[cid] = a.cid
                del actives[cid]
        for a in actives.values():
            if a.cur:
                a.edge = sorted(a.cur)
                a.cur = []
                a.last_row = row_dt

    row_dt = None
    row_pts: list[tuple[int, int]] = []
    for dt, i1, sim in stream:
        if dt != row_dt:
            if row_pts:
                flush_row(row_dt, row_pts)
            row_dt, row_pts = dt, []
        row_pts.append((i1, sim))
    if row_pts:
        flush_row(row_dt, row_pts)
    for a in actives.values():
        close(a)
    return done


def cluster_records(rec: np.ndarray, params: ClusterParams) -> list[Cluster]:
    """Cluster an in-memory triplet array (must be sorted by (dt, idx1))."""
    rec = np.asarray(rec, dtype=TRIPLET_DTYPE)
    dt = rec["dt"].astype(np.int64)
    i1 = rec["idx1"].astype(np.int64)
    ddt = np.diff(dt)
    if ((ddt < 0) | ((ddt == 0) & (np.diff(i1) < 0))).any():
        raise ConsistencyError("triplets not sorted by (dt, idx1)")
    stream = zip(dt.tolist(), i1.tolist(), rec["sim"].tolist())
    out = _cluster_stream(stream, params)
    out.sort(key=Cluster.sort_key)
    return out


def find_partition_points(path, parts: int) -> list[int]:
    """Record indices where the triplet file may be split for clustering.

    Aims for `parts` equal pieces; each boundary is moved forward to the
    next jump of two or more dt rows, across which no adjacency exists.
    Stretches without such a gap yield fewer boundaries than requested.
    """
    if parts < 1:
        raise ParameterError("parts must be >= 1")
    n = read_triplet_header(path)["count"]
    points: list[int] = []
    for p in range(1, parts):
        target = n * p // parts
        if points and target <= points[-1]:
            continue
        boundary = None
        scan_from = max(target - 1, points[-1] if points else 0)
        prev_dt = None
        pos = scan_from
        for rec in iter_triplet_batches(path, start=scan_from):
            dts = rec["dt"]
            if prev_dt is not None and dts[0] - prev_dt >= 2:
                boundary = pos
            else:
                jumps = np.nonzero(np.diff(dts) >= 2)[0]
                if jumps.size:
                    boundary = pos + int(jumps[0]) + 1
            if boundary is not None:
                break
            prev_dt = int(dts[-1])
            pos += rec.size
        if boundary is not None and 0 < boundary < n:
            points.append(boundary)
    return points


def cluster_triplet_file(path, params: ClusterParams, partitions: int = 1,
                         workers: int = 1) -> list[Cluster]:
    """Cluster a sorted triplet file, optionally over split ranges.

    With partitions > 1 the file is cut at safe dt gaps and the pieces
    are clustered independently (in threads when workers > 1); the
    result is identical to a serial pass.
    """
    n = read_triplet_header(path)["count"]
    points = find_partition_points(path, partitions) if partitions > 1 else []
    bounds = list(zip([0] + points, points + [n]))

    def job(se):
        start, stop = se
        return _cluster_stream(_tuple_stream(path, start, stop), params)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, bounds))
    else:
        parts = [job(se) for se in bounds]
    out = [c for part in parts for c in part]
    out.sort(key=Cluster.sort_key)
    return out


# ---------------------------------------------------------------------------
# station pairs and network association


@dataclass
class StationPair:
    """One candidate repeating event pair at one station."""

    station: str
    event1_epoch_s: float   # window-start epoch of the earlier occurrence
    delta_t_s: float        # time from first to second occurrence
    sim_sum: int
    pair_count: int


def station_pairs_from_clusters(clusters, station: str, window_lag_s: float,
                                start_epoch_s: float) -> list[StationPair]:
    """Convert cluster centroids from window units to epoch seconds."""
    return [
        StationPair(
            station=station,
            event1_epoch_s=start_epoch_s + c.idx1_centroid * window_lag_s,
            delta_t_s=c.dt_centroid * window_lag_s,
            sim_sum=c.sim_sum,
            pair_count=c.pair_count,
        )
        for c in clusters
    ]


@dataclass
class NetworkDetection:
    """A repeating event pair corroborated by several stations."""

    score: int
    delta_t_s: float
    event1_epoch_s: float
    arrivals: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def station_count(self) -> int:
        return len(self.arrivals)


def network_associate(pairs, dt_tol_s: float, start_tol_s: float,
                      min_stations: int = 2) -> list[NetworkDetection]:
    """Single-linkage association of station pairs into detections.

    Two station pairs are linked when both their inter-event times and
    their first-occurrence epochs agree within tolerance. Components
    seen by at least `min_stations` distinct stations are reported;
    each station contributes its highest-scoring member's arrivals.
    Results are independent of input order.
    """
    if dt_tol_s < 0 or start_tol_s < 0:
        raise ParameterError("tolerances must be >= 0")
    if min_stations < 1:
        raise ParameterError("min_stations must be >= 1")
    members = sorted(pairs, key=lambda p: (p.event1_epoch_s, p.delta_t_s,
                                           p.station, -p.sim_sum,
                                           -p.pair_count))
    n = len(members)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        pi = members[i]
        for j in range(i + 1, n):
            pj = members[j]
            if pj.event1_epoch_s - pi.event1_epoch_s > start_tol_s:
                break
            if abs(pi.delta_t_s - pj.delta_t_s) <= dt_tol_s:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(members[i])

    out = []
    for root in sorted(groups):
        ms = groups[root]
        stations = {p.station for p in ms}
        if len(stations) < min_stations:
            continue
        score = sum(p.sim_sum for p in ms)
        delta = sum(p.sim_sum * p.delta_t_s for p in ms) / score
        event1 = sum(p.sim_sum * p.event1_epoch_s for p in ms) / score
        det = NetworkDetection(score=score, delta_t_s=delta,
                               event1_epoch_s=event1)
        for st in sorted(stations):
            best = max((p for p in ms if p.station == st),
                       key=lambda p: (p.sim_sum, p.pair_count,
                                      -p.event1_epoch_s, -p.delta_t_s))
            det.arrivals[st] = (best.event1_epoch_s,
                                best.event1_epoch_s + best.delta_t_s)
        out.append(det)
    out.sort(key=lambda d: (-d.score, d.event1_epoch_s, d.delta_t_s))
    return out


def write_detection_csv(path, detections) -> None:
    """Ragged CSV: fixed columns, then one station:arrival1:arrival2 cell
    per corroborating station, stations in name order."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("station_count,score,delta_t_s,arrivals\n")
        for d in detections:
            cells = [f"{st}:{a1:.6f}:{a2:.6f}"
                     for st, (a1, a2) in sorted(d.arrivals.items())]
            f.write(f"{d.station_count},{d.score},{d.delta_t_s:.6f},"
                    + ",".join(cells) + "\n")


def write_detection_json(path, detections, meta: dict) -> None:
    """Canonical JSON report: metadata plus the full detection list."""
    doc = dict(meta)
    doc["n_detections"] = len(detections)
    doc["detections"] = [
        {
            "station_count": d.station_count,
            "score": d.score,
            "delta_t_s": d.delta_t_s,
            "event1_epoch_s": d.event1_epoch_s,
            "arrivals": {st: [a1, a2]
                         for st, (a1, a2) in sorted(d.arrivals.items())},
        }
        for d in detections
    ]
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
