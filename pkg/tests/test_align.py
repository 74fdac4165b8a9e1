"""Tests for channel combination, triplet clustering, and association."""

import numpy as np
import pytest

from quakescan import align
from quakescan.errors import ConsistencyError, ParameterError
from quakescan.lsh_search import TRIPLET_DTYPE, write_triplet_file


def make_records(rows):
    rec = np.array(rows, dtype=TRIPLET_DTYPE)
    return rec[np.lexsort((rec["idx1"], rec["dt"]))]


def cc_oracle(points, gap, min_size):
    """All-pairs union-find clustering reference."""
    n = len(points)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if (abs(points[i][0] - points[j][0]) <= 1
                    and abs(points[i][1] - points[j][1]) <= gap):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    comps = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(points[i])
    out = []
    for pts in comps.values():
        if len(pts) < min_size:
            continue
        dts = [p[0] for p in pts]
        i1s = [p[1] for p in pts]
        sims = [p[2] for p in pts]
        out.append((min(dts), max(dts), min(i1s), max(i1s), len(pts),
                    sum(sims), sum(d * s for d, s in zip(dts, sims)),
                    sum(i * s for i, s in zip(i1s, sims))))
    return sorted(out)


def cluster_tuples(clusters):
    return sorted(
        (c.dt_min, c.dt_max, c.idx1_min, c.idx1_max, c.pair_count,
         c.sim_sum, c.w_dt, c.w_idx) for c in clusters)


def test_combine_two_channels(tmp_path):
    a = make_records([(10, 3, 5), (10, 9, 6), (40, 2, 7)])
    b = make_records([(10, 3, 4), (25, 1, 9), (40, 2, 2)])
    pa, pb = tmp_path / "a.tri", tmp_path / "b.tri"
    write_triplet_file(pa, a, {"channel": "CH0"})
    write_triplet_file(pb, b, {"channel": "CH1"})
    out = tmp_path / "st.tri"
    n = align.combine_channel_triplets([pa, pb], out, threshold=1,
                                       header={"station": "A"})
    assert n == 4
    rec, header = __import__("quakescan.lsh_search", fromlist=["x"]) \
        .read_triplet_file(out)
    assert header["station"] == "A"
    got = [(int(r["dt"]), int(r["idx1"]), int(r["sim"])) for r in rec]
    assert got == [(10, 3, 9), (10, 9, 6), (25, 1, 9), (40, 2, 9)]
    # threshold drops weak combined pairs
    align.combine_channel_triplets([pa, pb], out, threshold=9,
                                   header={"station": "A"})
    rec2, _ = __import__("quakescan.lsh_search", fromlist=["x"]) \
        .read_triplet_file(out)
    assert [(int(r["dt"]), int(r["idx1"])) for r in rec2] == [
        (10, 3), (25, 1), (40, 2)]


def test_combine_unsorted_raises(tmp_path):
    rec = np.array([(10, 5, 2), (10, 3, 2)], dtype=TRIPLET_DTYPE)
    path = tmp_path / "u.tri"
    write_triplet_file(path, rec, {})
    with pytest.raises(ConsistencyError):
        align.combine_channel_triplets([path], tmp_path / "o.tri", 1, {})


def test_combine_validation(tmp_path):
    with pytest.raises(ParameterError):
        align.combine_channel_triplets([], tmp_path / "o.tri", 1, {})
    rec = np.array([(1, 0, 2)], dtype=TRIPLET_DTYPE)
    path = tmp_path / "a.tri"
    write_triplet_file(path, rec, {})
    with pytest.raises(ParameterError):
        align.combine_channel_triplets([path], tmp_path / "o.tri", 0, {})


def test_sort_triplet_file(tmp_path):
    rng = np.random.default_rng(0)
    rec = np.empty(1000, dtype=TRIPLET_DTYPE)
    rec["dt"] = rng.integers(1, 50, 1000)
    rec["idx1"] = rng.integers(0, 200, 1000)
    rec["sim"] = rng.integers(2, 9, 1000)
    src = tmp_path / "u.tri"
    write_triplet_file(src, rec, {})
    dst = tmp_path / "s.tri"
    n = align.sort_triplet_file(src, dst, {"sorted": True},
                                chunk_records=128)  # forces a multi-run merge
    assert n == 1000
    got, _ = __import__("quakescan.lsh_search", fromlist=["x"]) \
        .read_triplet_file(dst)
    want = rec[np.lexsort((rec["idx1"], rec["dt"]))]
    assert np.array_equal(np.sort(got, order=["dt", "idx1", "sim"]),
                          np.sort(want, order=["dt", "idx1", "sim"]))
    keys = list(zip(got["dt"].tolist(), got["idx1"].tolist()))
    assert keys == sorted(keys)
    dst2 = tmp_path / "s2.tri"
    align.sort_triplet_file(src, dst2, {"sorted": True}, chunk_records=128)
    assert dst.read_bytes() == dst2.read_bytes()


def test_cluster_simple_streak():
    rows = [(50, i, 4) for i in range(10, 21)] + [(51, 15, 6)]
    rec = make_records(rows)
    out = align.cluster_records(rec, align.ClusterParams())
    assert len(out) == 1
    c = out[0]
    assert (c.dt_min, c.dt_max, c.idx1_min, c.idx1_max) == (50, 51, 10, 20)
    assert c.pair_count == 12
    assert c.sim_sum == 11 * 4 + 6
    assert c.dt_centroid == pytest.approx((50 * 44 + 51 * 6) / 50)
    assert c.idx1_centroid == pytest.approx(
        (4 * sum(range(10, 21)) + 6 * 15) / 50)


def test_cluster_split_by_gap():
    rows = [(10, 0, 3), (10, 1, 3), (10, 2, 3),
            (10, 50, 3), (10, 51, 3), (10, 52, 3)]
    out = align.cluster_records(make_records(rows),
                                align.ClusterParams(min_size=2))
    assert len(out) == 2
    assert [(c.idx1_min, c.idx1_max) for c in out] == [(0, 2), (50, 52)]


def test_cluster_min_size_prune():
    rows = [(10, 0, 3), (10, 1, 3), (30, 7, 9)]
    out = align.cluster_records(make_records(rows),
                                align.ClusterParams(min_size=2))
    assert len(out) == 1 and out[0].pair_count == 2


def test_cluster_max_width_guard():
    rows = [(dt, 5, 3) for dt in range(10, 21)]
    rec = make_records(rows)
    out = align.cluster_records(rec, align.ClusterParams(
        gap=3, max_width=3, min_size=1))
    assert [(c.dt_min, c.dt_max) for c in out] == [(10, 13), (14, 17),
                                                   (18, 20)]
    assert sum(c.pair_count for c in out) == 11
    wide = align.cluster_records(rec, align.ClusterParams(
        gap=3, max_width=100, min_size=1))
    assert len(wide) == 1 and wide[0].pair_count == 11


def test_cluster_matches_cc_oracle():
    rng = np.random.default_rng(42)
    for trial in range(150):
        gap = int(rng.integers(1, 4))
        n_pts = int(rng.integers(1, 120))
        cells = rng.choice(31 * 41, size=n_pts, replace=False)
        points = [(int(c // 41), int(c % 41), int(rng.integers(2, 11)))
                  for c in cells]
        rec = make_records([(d, i, s) for d, i, s in points])
        got = align.cluster_records(rec, align.ClusterParams(
            gap=gap, max_width=1000, min_size=1))
        assert cluster_tuples(got) == cc_oracle(points, gap, 1), \
            f"trial {trial} gap {gap}"


def test_cluster_file_partitions_match_serial(tmp_path):
    rng = np.random.default_rng(7)
    rows = []
    for block in range(40):
        base = block * 6  # blocks separated by dt jumps >= 2
        for _ in range(int(rng.integers(3, 15))):
            rows.append((base + int(rng.integers(0, 2)),
                         int(rng.integers(0, 60)), int(rng.integers(2, 9))))
    rec = make_records(rows)
    uniq = np.unique(rec[["dt", "idx1"]], return_index=True)[1]
    rec = rec[np.sort(uniq)]
    path = tmp_path / "t.tri"
    write_triplet_file(path, rec, {})
    params = align.ClusterParams(min_size=1)
    serial = align.cluster_triplet_file(path, params)
    assert len(serial) > 20
    for parts, workers in [(4, 1), (9, 3), (40, 2)]:
        got = align.cluster_triplet_file(path, params, partitions=parts,
                                         workers=workers)
        assert cluster_tuples(got) == cluster_tuples(serial)
        assert [c.sort_key() for c in got] == [c.sort_key() for c in serial]
    points = align.find_partition_points(path, 4)
    assert points and all(0 < b < rec.size for b in points)
    assert points == sorted(set(points))
    for b in points:
        assert int(rec["dt"][b]) - int(rec["dt"][b - 1]) >= 2


def test_find_partition_points_no_gaps(tmp_path):
    rec = make_records([(5 + i // 4, i % 4 * 10, 3) for i in range(40)])
    path = tmp_path / "d.tri"
    write_triplet_file(path, rec, {})
    assert align.find_partition_points(path, 4) == []
    with pytest.raises(ParameterError):
        align.find_partition_points(path, 0)


def test_station_pairs_from_clusters():
    c = align.Cluster(dt_min=99, dt_max=101, idx1_min=40, idx1_max=44,
                      pair_count=5, sim_sum=10, w_dt=1000, w_idx=420)
    (p,) = align.station_pairs_from_clusters([c], "ST1", window_lag_s=2.0,
                                             start_epoch_s=100.0)
    assert p.station == "ST1"
    assert p.event1_epoch_s == pytest.approx(100.0 + 42.0 * 2.0)
    assert p.delta_t_s == pytest.approx(200.0)
    assert p.sim_sum == 10 and p.pair_count == 5


def sp(st, e1, dt, sim=10, count=5):
    return align.StationPair(st, e1, dt, sim, count)


def test_network_associate_basic():
    pairs = [
        sp("A", 100.0, 300.0, sim=20),
        sp("B", 103.7, 300.4, sim=12),
        sp("C", 108.2, 299.8, sim=8),
        sp("A", 500.0, 260.0, sim=9),   # single station, dropped
        sp("B", 100.5, 800.0, sim=7),   # same start, wrong dt, dropped
    ]
    out = align.network_associate(pairs, dt_tol_s=2.0, start_tol_s=15.0,
                                  min_stations=2)
    assert len(out) == 1
    d = out[0]
    assert d.station_count == 3
    assert d.score == 40
    want_dt = (20 * 300.0 + 12 * 300.4 + 8 * 299.8) / 40
    assert d.delta_t_s == pytest.approx(want_dt)
    assert d.arrivals["B"] == (103.7, pytest.approx(404.1))
    assert set(d.arrivals) == {"A", "B", "C"}
    # with min_stations=1 the leftovers appear, ranked by score
    all_out = align.network_associate(pairs, 2.0, 15.0, min_stations=1)
    assert [x.score for x in all_out] == [40, 9, 7]


def test_network_associate_permutation_invariant():
    rng = np.random.default_rng(3)
    pairs = [sp(f"S{int(rng.integers(0, 5))}",
                float(rng.uniform(0, 2000)),
                float(rng.uniform(100, 400)),
                sim=int(rng.integers(5, 40)),
                count=int(rng.integers(3, 12)))
             for _ in range(60)]
    base = align.network_associate(pairs, 5.0, 20.0, min_stations=2)
    for seed in range(5):
        perm = list(np.random.default_rng(seed).permutation(len(pairs)))
        got = align.network_associate([pairs[i] for i in perm], 5.0, 20.0,
                                      min_stations=2)
        assert got == base


def test_network_associate_time_shift():
    pairs = [sp("A", 100.0, 300.0), sp("B", 104.0, 300.5),
             sp("A", 700.0, 120.0), sp("C", 702.0, 119.5)]
    base = align.network_associate(pairs, 2.0, 10.0)
    shifted = [sp(p.station, p.event1_epoch_s + 5000.0, p.delta_t_s,
                  p.sim_sum, p.pair_count) for p in pairs]
    out = align.network_associate(shifted, 2.0, 10.0)
    assert len(out) == len(base) == 2
    for a, b in zip(out, base):
        assert a.score == b.score
        assert a.delta_t_s == pytest.approx(b.delta_t_s, abs=1e-9)
        assert a.event1_epoch_s == pytest.approx(
            b.event1_epoch_s + 5000.0, abs=1e-6)
        for st in b.arrivals:
            assert a.arrivals[st][0] == pytest.approx(
                b.arrivals[st][0] + 5000.0, abs=1e-6)


def test_detection_report_files(tmp_path):
    pairs = [sp("A", 100.0, 300.0, sim=20), sp("B", 103.7, 300.4, sim=12)]
    dets = align.network_associate(pairs, 2.0, 15.0)
    csv_path = tmp_path / "d.csv"
    align.write_detection_csv(csv_path, dets)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "station_count,score,delta_t_s,arrivals"
    cells = lines[1].split(",")
    assert cells[0] == "2" and cells[1] == "32"
    assert cells[3].startswith("A:100.000000:400.")
    assert cells[4].startswith("B:103.700000:404.1")
    json_path = tmp_path / "d.json"
    align.write_detection_json(json_path, dets, {"config_hash": "abc"})
    import json as _json
    doc = _json.loads(json_path.read_text())
    assert doc["config_hash"] == "abc"
    assert doc["n_detections"] == 1
    assert doc["detections"][0]["arrivals"]["B"][0] == pytest.approx(103.7)
    # byte stability
    c2, j2 = tmp_path / "d2.csv", tmp_path / "d2.json"
    align.write_detection_csv(c2, dets)
    align.write_detection_json(j2, dets, {"config_hash": "abc"})
    assert c2.read_bytes() == csv_path.read_bytes()
    assert j2.read_bytes() == json_path.read_bytes()
