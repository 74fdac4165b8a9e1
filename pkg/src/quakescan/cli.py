"""Command-line pipeline driver.

Each stage is a subcommand reading and writing files under the config's
output directory, so a run can be restarted or distributed stage by
stage: synth (optional data generation), fingerprint, search, align,
and detect (all three analysis stages in sequence). spectrogram and
bench are inspection tools.

Every artifact records the config hash; a stage refuses inputs
produced under a different configuration. Reruns with equal config and
seeds reproduce every output byte for byte, so manifests carry no
timestamps. Exit codes: 0 success, 2 configuration error, 3 data
error.
"""

from __future__ import annotations

import argparse
import os
import sys

from .align import (
    cluster_triplet_file,
    combine_channel_triplets,
    network_associate,
    station_pairs_from_clusters,
    write_detection_csv,
    write_detection_json,
)
from .bench import end_to_end_eval, kernel_benchmark, scurve_experiment
from .config import (
    PipelineConfig,
    StationConfig,
    load_config,
    require_config_match,
    write_json_canonical,
    write_manifest,
)
from .errors import ConsistencyError, ParameterError, QuakescanError
from .fingerprint import (
    fingerprint_series,
    read_fingerprint_file,
    write_fingerprint_file,
)
from .ingest import (
    bandpass,
    event_arrivals,
    load_timeseries,
    save_timeseries,
    spectrogram_preview,
    synthesize,
)
from .lsh_search import (
    read_triplet_header,
    search_fingerprints,
    write_triplet_file,
)

_WAVE_SUFFIXES = (".f32le", ".json")


def _data_stem(entry: str) -> str:
    for suf in _WAVE_SUFFIXES:
        if entry.endswith(suf):
            return entry[: -len(suf)]
    return entry


def _channel_id_of(station: StationConfig, entry: str) -> str:
    """Channel id from a `<station>.<channel>` waveform file name."""
    name = os.path.basename(_data_stem(entry))
    prefix = station.station_id + "."
    if not name.startswith(prefix) or name == prefix:
        raise ParameterError(
            f"station {station.station_id}: channel file {entry!r} must be "
            "named <station>.<channel>")
    return name[len(prefix):]


def _channel_entry(station: StationConfig, channel_id: str) -> str:
    for entry in station.channels:
        if _channel_id_of(station, entry) == channel_id:
            return entry
    raise ParameterError(
        f"station {station.station_id} has no channel {channel_id!r}")


def _load_channel(cfg: PipelineConfig, station: StationConfig,
                  channel_id: str):
    stem = _data_stem(cfg.wave_path(station.station_id,
                                    _channel_entry(station, channel_id)))
    for suf in _WAVE_SUFFIXES:
        if not os.path.exists(stem + suf):
            raise ParameterError(
                f"referenced waveform {stem + suf} does not exist; "
                "generate or stage the data first")
    ts = load_timeseries(stem)
    if (ts.station_id, ts.channel_id) != (station.station_id, channel_id):
        raise ConsistencyError(
            f"{stem} holds {ts.station_id}.{ts.channel_id}, config expects "
            f"{station.station_id}.{channel_id}")
    return ts, [stem + suf for suf in _WAVE_SUFFIXES]


def _ensure_dir(path: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)


# ---------------------------------------------------------------------------
# stages

def cmd_synth(cfg: PipelineConfig) -> list[str]:
    """Generate the configured synthetic dataset plus its ground truth."""
    spec = cfg.synth_spec()
    series = synthesize(spec)
    outputs = []
    for ts in series:
        stem = cfg.out_path("waves", f"{ts.station_id}.{ts.channel_id}")
        _ensure_dir(stem)
        outputs.extend(save_timeseries(ts, stem))
    truth_path = cfg.out_path("truth.json")
    write_json_canonical(truth_path, {
        "config_hash": cfg.config_hash,
        "arrivals": event_arrivals(spec),
    })
    outputs.append(truth_path)
    write_manifest(cfg, "synth", truth_path, inputs=[], outputs=outputs,
                   extra={"seed": cfg.seeds["synth"],
                          "n_series": len(series)})
    return outputs


def cmd_spectrogram(cfg: PipelineConfig, station_id: str, channel_id: str,
                    window_s: float) -> tuple[str, str]:
    """Preview one channel's spectrogram for bandpass selection (unfiltered)."""
    st = cfg.station(station_id)
    ts, inputs = _load_channel(cfg, st, channel_id)
    stem = cfg.out_path("previews", f"{station_id}.{channel_id}")
    _ensure_dir(stem)
    csv_path, svg_path = spectrogram_preview(ts, window_s, stem)
    write_manifest(cfg, "spectrogram", csv_path, inputs=inputs,
                   outputs=[csv_path, svg_path],
                   extra={"window_s": window_s})
    return csv_path, svg_path


def cmd_fingerprint(cfg: PipelineConfig, station_id: str,
                    channel_id: str) -> str:
    """Fingerprint one channel: load, optional bandpass, transform, write."""
    st = cfg.station(station_id)
    ts, inputs = _load_channel(cfg, st, channel_id)
    if st.bandpass is not None:
        ts = bandpass(ts, st.bandpass)
    fps, stats = fingerprint_series(ts, cfg.fingerprint,
                                    mad_rate=cfg.mad_rate,
                                    mad_seed=cfg.seeds["mad"])
    fp_path = cfg.fingerprint_path(station_id, channel_id)
    _ensure_dir(fp_path)
    write_fingerprint_file(fp_path, fps, extra={
        "config_hash": cfg.config_hash,
        "mad_seed": stats.seed,
        "mad_rate": stats.rate,
    })
    write_manifest(cfg, "fingerprint", fp_path, inputs=inputs,
                   outputs=[fp_path],
                   extra={"mad_seed": stats.seed, "mad_rate": stats.rate,
                          "mad_sampled": stats.n_sampled,
                          "sample_rate_hz": ts.sample_rate_hz,
                          "n_fingerprints": len(fps)})
    return fp_path


def cmd_search(cfg: PipelineConfig, station_id: str, channel_id: str) -> str:
    """Similarity search over one channel's fingerprints."""
    fp_path = cfg.fingerprint_path(station_id, channel_id)
    if not os.path.exists(fp_path):
        raise ParameterError(
            f"missing fingerprint file {fp_path}; run the fingerprint "
            "stage first")
    fps = read_fingerprint_file(fp_path)
    require_config_match(fps.meta, cfg, fp_path)
    rec, stats, _ = search_fingerprints(fps, cfg.search, workers=cfg.workers)
    tri_path = cfg.triplet_path(station_id, channel_id)
    _ensure_dir(tri_path)
    write_triplet_file(tri_path, rec, header={
        "config_hash": cfg.config_hash,
        "station": station_id,
        "channel": channel_id,
        "window_len_s": fps.window_len_s,
        "window_lag_s": fps.window_lag_s,
        "start_epoch_s": fps.meta["start_epoch_s"],
        "sorted": True,
    })
    stats_path = cfg.stats_path(station_id, channel_id)
    _ensure_dir(stats_path)
    write_json_canonical(stats_path, {
        "config_hash": cfg.config_hash,
        "station": station_id,
        "channel": channel_id,
        "stats": stats.to_dict(),
    })
    write_manifest(cfg, "search", tri_path, inputs=[fp_path],
                   outputs=[tri_path, stats_path],
                   extra={"n_triplets": int(rec.size)})
    return tri_path


def cmd_align(cfg: PipelineConfig) -> tuple[str, str]:
    """Combine channels, cluster, and associate into network detections."""
    pairs = []
    inputs, intermediates = [], []
    for st in cfg.stations:
        chan_paths = []
        lag = start = None
        for entry in st.channels:
            ch = _channel_id_of(st, entry)
            tri = cfg.triplet_path(st.station_id, ch)
            if not os.path.exists(tri):
                raise ParameterError(
                    f"missing triplet file {tri}; run the search stage first")
            hdr = read_triplet_header(tri)
            require_config_match(hdr, cfg, tri)
            if hdr.get("station") != st.station_id:
                raise ConsistencyError(
                    f"{tri} belongs to station {hdr.get('station')!r}")
            key = (hdr.get("window_lag_s"), hdr.get("start_epoch_s"))
            if lag is None:
                lag, start = key
            elif (lag, start) != key:
                raise ConsistencyError(
                    f"station {st.station_id}: channels disagree on window "
                    "lag or start epoch")
            chan_paths.append(tri)
        combined = cfg.combined_path(st.station_id)
        _ensure_dir(combined)
        combine_channel_triplets(
            chan_paths, combined, threshold=cfg.align.station_threshold,
            header={"config_hash": cfg.config_hash, "station": st.station_id,
                    "threshold": cfg.align.station_threshold,
                    "window_lag_s": lag, "start_epoch_s": start,
                    "sorted": True})
        clusters = cluster_triplet_file(
            combined, cfg.align.cluster_params(),
            partitions=cfg.workers, workers=cfg.workers)
        pairs.extend(station_pairs_from_clusters(
            clusters, st.station_id, float(lag), float(start)))
        inputs.extend(chan_paths)
        intermediates.append(combined)
    detections = network_associate(
        pairs, dt_tol_s=cfg.align.dt_tol_s, start_tol_s=cfg.align.start_tol_s,
        min_stations=cfg.align.min_stations)
    csv_path = cfg.out_path("detections.csv")
    json_path = cfg.out_path("detections.json")
    write_detection_csv(csv_path, detections)
    write_detection_json(json_path, detections, meta={
        "config_hash": cfg.config_hash,
        "min_stations": cfg.align.min_stations,
        "n_station_pairs": len(pairs),
    })
    write_manifest(cfg, "align", json_path, inputs=inputs,
                   outputs=intermediates + [csv_path, json_path],
                   extra={"n_detections": len(detections)})
    return csv_path, json_path


def cmd_detect(cfg: PipelineConfig) -> tuple[str, str]:
    """Fingerprint, search, and align every configured channel."""
    for st in cfg.stations:
        for entry in st.channels:
            ch = _channel_id_of(st, entry)
            cmd_fingerprint(cfg, st.station_id, ch)
            cmd_search(cfg, st.station_id, ch)
    return cmd_align(cfg)


# ---------------------------------------------------------------------------
# standalone experiments

def cmd_bench(experiment: str, out_dir: str, seed: int,
              workers: int) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    if experiment == "scurve":
        rows = scurve_experiment(k=4, m=2, t=30,
                                 similarities=(0.2, 0.3, 0.4, 0.5, 0.6, 0.8),
                                 trials=120, seed=seed)
        csv_path = os.path.join(out_dir, "scurve.csv")
        cols = ["target_jaccard", "actual_jaccard", "expected", "observed",
                "wilson_lo", "wilson_hi", "trials"]
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write(",".join(cols) + "\n")
            for row in rows:
                f.write(",".join(repr(row[c]) for c in cols) + "\n")
        json_path = os.path.join(out_dir, "scurve.json")
        write_json_canonical(json_path, {
            "experiment": "scurve", "seed": seed,
            "k": 4, "m": 2, "t": 30, "rows": rows,
        })
        return [csv_path, json_path]
    if experiment == "kernel":
        res = kernel_benchmark(n=6000, repeats=1)
        path = os.path.join(out_dir, "kernel.json")
        write_json_canonical(path, {"experiment": "kernel", **res})
        return [path]
    if experiment == "eval":
        res = end_to_end_eval(seed=seed)
        path = os.path.join(out_dir, "eval.json")
        write_json_canonical(path, {
            "experiment": "eval", "seed": seed, "workers": workers, **res,
        })
        return [path]
    raise ParameterError(
        f"unknown bench experiment {experiment!r}; "
        "known: scurve, kernel, eval")


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def _add_common(sp, with_config: bool = True):
    if with_config:
        sp.add_argument("--config", required=True,
                        help="path to the run configuration")
    sp.add_argument("--workers", type=int, default=None,
                    help="worker count for parallel stages")
    sp.add_argument("--seed", type=int, default=None,
                    help="override every configured seed")
    sp.add_argument("--out", default=None,
                    help="override the configured output directory")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="quakescan",
        description="Repeating-event detection in continuous waveform data")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate the configured synthetic data")
    _add_common(sp)

    sp = sub.add_parser("spectrogram",
                        help="write a spectrogram preview of one channel")
    _add_common(sp)
    sp.add_argument("station")
    sp.add_argument("channel")
    sp.add_argument("--window", type=float, default=2.0,
                    help="STFT frame length in seconds")

    sp = sub.add_parser("fingerprint", help="fingerprint one channel")
    _add_common(sp)
    sp.add_argument("station")
    sp.add_argument("channel")

    sp = sub.add_parser("search",
                        help="similarity search over one channel")
    _add_common(sp)
    sp.add_argument("station")
    sp.add_argument("channel")

    sp = sub.add_parser("align",
                        help="combine, cluster, and associate detections")
    _add_common(sp)

    sp = sub.add_parser("detect", help="run every stage for every channel")
    _add_common(sp)

    sp = sub.add_parser("bench", help="standalone validation experiments")
    sp.add_argument("experiment", choices=["scurve", "kernel", "eval"])
    _add_common(sp, with_config=False)
    return p


def _dispatch(args) -> list[str]:
    if args.command == "bench":
        return cmd_bench(args.experiment, args.out or "qs_bench",
                         seed=args.seed or 0, workers=args.workers or 1)
    cfg = load_config(args.config, out=args.out, workers=args.workers,
                      seed=args.seed)
    if args.command == "synth":
        return cmd_synth(cfg)
    if args.command == "spectrogram":
        return list(cmd_spectrogram(cfg, args.station, args.channel,
                                    args.window))
    if args.command == "fingerprint":
        return [cmd_fingerprint(cfg, args.station, args.channel)]
    if args.command == "search":
        return [cmd_search(cfg, args.station, args.channel)]
    if args.command == "align":
        return list(cmd_align(cfg))
    if args.command == "detect":
        return list(cmd_detect(cfg))
    raise ParameterError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        outputs = _dispatch(args)
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except QuakescanError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
