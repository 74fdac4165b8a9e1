"""Tests for reference implementations and the experiment harness."""

import numpy as np
import pytest

from quakescan import bench
from quakescan.errors import ParameterError
from quakescan.ingest import SourceSpec, StationSpec, SynthSpec
from quakescan.minmax_hash import gen_hash_mapping, signatures


def test_signatures_reference_matches_production():
    rng = np.random.default_rng(0)
    d, n, k_bits = 512, 300, 40
    bits = np.stack([np.sort(rng.choice(d, k_bits, replace=False))
                     for _ in range(n)]).astype(np.uint32)
    mapping = gen_hash_mapping(d, t=12, k=4, seed=7)
    assert np.array_equal(signatures(bits, mapping),
                          bench.signatures_reference(bits, mapping))


def test_pack_bitsets():
    bits = np.array([[0, 1, 63, 64, 200], [5, 70, 128, 129, 199]],
                    dtype=np.uint32)
    packed = bench.pack_bitsets(bits, 256)
    assert packed.shape == (2, 4)
    assert int(np.bitwise_count(packed).sum()) == 10
    assert packed[0, 0] == (1 | 2 | (1 << 63))
    assert packed[0, 1] == 1
    assert packed[1, 1] == (1 << 6)  # bit 70 -> word 1, offset 6
    assert packed[1, 2] == 3         # bits 128, 129
    # membership check bit by bit
    for row in range(2):
        for b in bits[row]:
            assert (packed[row, b // 64] >> np.uint64(b % 64)) & np.uint64(1)


def test_brute_force_pairs():
    rng = np.random.default_rng(1)
    d, n, k_bits = 256, 60, 20
    bits = np.stack([np.sort(rng.choice(d, k_bits, replace=False))
                     for _ in range(n)]).astype(np.uint32)
    bits[10] = bits[3]  # exact duplicate
    rec = bench.brute_force_pairs(bits, d, min_jaccard=0.0)
    assert rec.size == n * (n - 1) // 2
    sets = [set(map(int, row)) for row in bits]
    for r in rec[:200]:
        i, j = int(r["i"]), int(r["j"])
        want = len(sets[i] & sets[j]) / len(sets[i] | sets[j])
        assert r["jaccard"] == pytest.approx(want)
    dup = rec[(rec["i"] == 3) & (rec["j"] == 10)]
    assert dup["jaccard"][0] == 1.0
    top = bench.brute_force_pairs(bits, d, min_jaccard=0.99)
    assert [(int(r["i"]), int(r["j"])) for r in top] == [(3, 10)]


def test_wilson_interval():
    lo, hi = bench.wilson_interval(50, 100)
    assert lo == pytest.approx(0.40383, abs=1e-4)
    assert hi == pytest.approx(0.59617, abs=1e-4)
    assert bench.wilson_interval(0, 0) == (0.0, 1.0)
    lo0, hi0 = bench.wilson_interval(0, 20)
    assert lo0 == 0.0 and 0 < hi0 < 0.25
    lo1, hi1 = bench.wilson_interval(20, 20)
    assert hi1 == 1.0 and 0.75 < lo1 < 1.0


def test_scurve_experiment_small():
    res = bench.scurve_experiment(k=4, m=2, t=20, similarities=[0.4, 0.7],
                                  trials=150, seed=5)
    assert len(res) == 2
    for row in res:
        assert abs(row["actual_jaccard"] - row["target_jaccard"]) < 0.02
        assert abs(row["observed"] - row["expected"]) < 0.12
        assert row["wilson_lo"] <= row["observed"] <= row["wilson_hi"]
    assert res[1]["expected"] > res[0]["expected"]
    with pytest.raises(ParameterError):
        bench.scurve_experiment(4, 2, 20, [0.999], 1, d=128)


def test_false_negative_experiment():
    res = bench.false_negative_experiment(seed=3, per_level=40)
    assert res["pairs"] == 200
    assert abs(res["missed"] - res["expected"]) <= max(4 * res["sigma"], 6)


def test_selectivity_experiment_small():
    res = bench.selectivity_experiment(seed=2, n=600, t=30)
    assert res["k4"]["selectivity"] > 0
    assert res["selectivity_ratio"] < 0.5
    assert res["k8"]["lookups_total"] < res["k4"]["lookups_total"]


def test_occurrence_experiment_small():
    res = bench.occurrence_experiment(seed=4, n=2000, burst=150,
                                      n_event_pairs=10, threshold=0.02)
    assert res["burst_triplets_off"] > 500
    assert res["burst_triplets_on"] == 0
    assert res["event_pairs_found_on"] == 10
    assert res["filtered_fingerprints"] >= 0.9 * res["burst_size"]
    assert res["reduction"] > 5


def small_eval_spec():
    # shrunk copy of the default eval layout: narrowband sequences in
    # field-colored noise, 2 + 2 occurrences = 2 pairs
    sources = [
        SourceSpec(f"S{i}", occurrences=[40.0 + 30 * i, 340.0 + 70 * i],
                   kind="bandnoise", center_hz=3.5625 + 1.875 * i,
                   duration_s=15.0, band_width_hz=0.4)
        for i in range(2)
    ]
    return SynthSpec(
        duration_s=600.0, rng_seed=1, noise_sigma=1.0, snr=2.0,
        noise_color="field",
        stations=[StationSpec("ST0", 0.0, 1), StationSpec("ST1", 3.0, 1)],
        sources=sources,
    )


def test_end_to_end_eval_small():
    res = bench.end_to_end_eval(spec=small_eval_spec(), station_threshold=2)
    assert res["n_pairs"] == 2
    assert res["matched"] == 2
    assert res["false_positives"] == 0
    assert res["elapsed_s"] < 120


def test_kernel_benchmark():
    res = bench.kernel_benchmark(n=1500, k_bits=80, d=1024, t=20, k=4,
                                 repeats=1)
    assert res["python_fps_per_s"] > 0
    if res["compiled_fps_per_s"] is not None:
        assert res["identical"] is True
        assert res["compiled_fps_per_s"] > 0
