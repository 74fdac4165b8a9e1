"""Declarative run configuration and the config-identity hash.

A pipeline run is described by one TOML-style document. The parser
covers the subset needed here: `[table]` and `[[array-of-table]]`
headers with dotted paths, `key = value` lines holding strings,
numbers, booleans, or flat arrays, and # comments.

Every stage output records the sha256 of the canonical JSON form of
the document's semantic fields (analysis parameters, seeds, station
layout), and stages refuse inputs carrying a different hash, so
artifacts from two configurations can never be mixed silently.
Location and performance fields (out_dir, data_dir, workers, search
partitions) stay outside the hash: moving a run or changing its
parallelism must not change its identity.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from dataclasses import dataclass, field

from .align import ClusterParams
from .errors import ConsistencyError, ParameterError
from .fingerprint import FingerprintParams, StftParams
from .ingest import (
    BandpassSpec,
    SourceSpec,
    StationSpec,
    SynthSpec,
    check_occurrences,
)
from .lsh_search import PROFILES, SearchConfig

_BARE_KEY = re.compile(r"^[A-Za-z0-9_-]+$")


# ---------------------------------------------------------------------------
# TOML-subset parsing

def _split_comment(line: str) -> str:
    out = []
    in_str = False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def _key_path(text: str, line_no: int) -> list[str]:
    parts = [p.strip() for p in text.split(".")]
    if not parts or not all(_BARE_KEY.match(p) for p in parts):
        raise ParameterError(f"config line {line_no}: bad table name {text!r}")
    return parts


def _split_items(text: str) -> list[str]:
    items, cur, in_str = [], [], False
    for ch in text:
        if ch == '"':
            in_str = not in_str
        if ch == "," and not in_str:
            items.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    items.append("".join(cur))
    return items


def _parse_scalar(text: str, line_no: int):
    if text.startswith('"'):
        if len(text) < 2 or not text.endswith('"') or '"' in text[1:-1]:
            raise ParameterError(f"config line {line_no}: bad string {text!r}")
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ParameterError(
            f"config line {line_no}: cannot parse value {text!r}") from None


def _parse_value(text: str, line_no: int):
    if text.startswith("["):
        if not text.endswith("]"):
            raise ParameterError(f"config line {line_no}: unterminated array")
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(p.strip(), line_no) for p in _split_items(inner)]
    return _parse_scalar(text, line_no)


def _descend(root: dict, path: list[str], line_no: int) -> dict:
    node = root
    for part in path:
        nxt = node.setdefault(part, {})
        if isinstance(nxt, list):
            nxt = nxt[-1]
        if not isinstance(nxt, dict):
            raise ParameterError(
                f"config line {line_no}: {part!r} is not a table")
        node = nxt
    return node


def parse_toml(text: str) -> dict:
    """Parse the TOML subset described in the module docstring."""
    root: dict = {}
    cur = root
    seen_tables: set[tuple] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _split_comment(raw).strip()
        if not line:
            continue
        if line.startswith("[["):
            if not line.endswith("]]"):
                raise ParameterError(
                    f"config line {line_no}: unterminated table header")
            path = _key_path(line[2:-2], line_no)
            parent = _descend(root, path[:-1], line_no)
            arr = parent.setdefault(path[-1], [])
            if not isinstance(arr, list):
                raise ParameterError(
                    f"config line {line_no}: {path[-1]!r} is not a table array")
            cur = {}
            arr.append(cur)
        elif line.startswith("["):
            if not line.endswith("]"):
                raise ParameterError(
                    f"config line {line_no}: unterminated table header")
            path = _key_path(line[1:-1], line_no)
            if tuple(path) in seen_tables:
                raise ParameterError(
                    f"config line {line_no}: duplicate table "
                    f"{'.'.join(path)!r}")
            seen_tables.add(tuple(path))
            parent = _descend(root, path[:-1], line_no)
            cur = parent.setdefault(path[-1], {})
            if not isinstance(cur, dict):
                raise ParameterError(
                    f"config line {line_no}: {path[-1]!r} is not a table")
        else:
            key, eq, rest = line.partition("=")
            key, rest = key.strip(), rest.strip()
            if not eq or not rest or not _BARE_KEY.match(key):
                raise ParameterError(
                    f"config line {line_no}: expected `key = value`")
            if key in cur:
                raise ParameterError(
                    f"config line {line_no}: duplicate key {key!r}")
            cur[key] = _parse_value(rest, line_no)
    return root


# ---------------------------------------------------------------------------
# typed configuration

@dataclass
class AlignParams:
    """Channel-combine threshold, clustering shape, and association knobs."""

    station_threshold: int = 3
    gap: int = 3
    max_width: int = 3
    min_size: int = 3
    min_stations: int = 2
    dt_tol_s: float = 2.0
    start_tol_s: float = 15.0

    def cluster_params(self) -> ClusterParams:
        return ClusterParams(gap=self.gap, max_width=self.max_width,
                             min_size=self.min_size)

    def validate(self) -> None:
        self.cluster_params().validate()
        if self.station_threshold < 1:
            raise ParameterError("station_threshold must be >= 1")
        if self.min_stations < 1:
            raise ParameterError("min_stations must be >= 1")
        if self.dt_tol_s < 0 or self.start_tol_s < 0:
            raise ParameterError("association tolerances must be >= 0")


@dataclass
class StationConfig:
    station_id: str
    channels: list[str]  # waveform paths relative to data_dir
    bandpass: BandpassSpec | None = None


@dataclass
class PipelineConfig:
    """One run's complete description plus its identity hash."""

    config_hash: str
    out_dir: str   # resolved absolute
    data_dir: str  # resolved absolute; waveform paths hang off this
    workers: int
    seeds: dict = field(default_factory=dict)  # mad / search / synth
    mad_rate: float = 0.1
    fingerprint: FingerprintParams = field(default_factory=FingerprintParams)
    search: SearchConfig = field(default_factory=SearchConfig)
    align: AlignParams = field(default_factory=AlignParams)
    stations: list = field(default_factory=list)
    synth: dict | None = None

    def out_path(self, *parts) -> str:
        return os.path.join(self.out_dir, *parts)

    def wave_path(self, station_id: str, channel_entry: str) -> str:
        del station_id
        return os.path.join(self.data_dir, channel_entry)

    def fingerprint_path(self, station_id: str, channel_id: str) -> str:
        return self.out_path("fingerprints", f"{station_id}.{channel_id}.fp")

    def triplet_path(self, station_id: str, channel_id: str) -> str:
        return self.out_path("triplets", f"{station_id}.{channel_id}.tri")

    def combined_path(self, station_id: str) -> str:
        return self.out_path("triplets", f"{station_id}.combined.tri")

    def stats_path(self, station_id: str, channel_id: str) -> str:
        return self.out_path("stats", f"{station_id}.{channel_id}.search.json")

    def station(self, station_id: str) -> StationConfig:
        for st in self.stations:
            if st.station_id == station_id:
                return st
        raise ParameterError(f"config has no station {station_id!r}")

    def synth_spec(self) -> SynthSpec:
        if self.synth is None:
            raise ParameterError("config has no [synth] section")
        return _build_synth(self.synth, self.seeds["synth"])


_TOP_KEYS = {"out_dir", "data_dir", "workers", "seeds", "fingerprint",
             "search", "align", "station", "synth"}
_SEED_KEYS = {"mad", "search", "synth"}
_FP_KEYS = {"window_len_s", "window_lag_s", "freq_bins", "time_bins", "top_k",
            "band_low_hz", "band_high_hz", "mad_rate", "stft"}
_STFT_KEYS = {"frame_len_s", "hop_s"}
_SEARCH_KEYS = {"profile", "tables", "hash_funcs", "min_matches", "partitions",
                "near_repeat_exclusion_s", "occurrence_threshold"}
_ALIGN_KEYS = {"station_threshold", "gap", "max_width", "min_size",
               "min_stations", "dt_tol_s", "start_tol_s"}
_STATION_KEYS = {"id", "channels", "bandpass_low_hz", "bandpass_high_hz",
                 "bandpass_order"}
_SYNTH_KEYS = {"duration_s", "sample_rate_hz", "noise_sigma", "snr",
               "start_epoch_s", "noise_color", "noise_floor_frac",
               "station", "source"}
_SYNTH_STATION_KEYS = {"id", "delay_s", "channels"}
_SYNTH_SOURCE_KEYS = {"id", "kind", "center_hz", "duration_s", "amplitude",
                      "band_width_hz", "occurrences"}


def _check_keys(section, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ParameterError(f"{where} must be a table")
    unknown = set(section) - allowed
    if unknown:
        raise ParameterError(
            f"{where} has unknown keys: {', '.join(sorted(unknown))}")


def _num(section: dict, key: str, default, where: str) -> float:
    val = section.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParameterError(f"{where}.{key} must be a number")
    return float(val)


def _intval(section: dict, key: str, default, where: str) -> int:
    val = section.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ParameterError(f"{where}.{key} must be an integer")
    return val


def _fingerprint_params(sec: dict) -> tuple[FingerprintParams, float]:
    _check_keys(sec, _FP_KEYS, "[fingerprint]")
    stft_sec = sec.get("stft", {})
    _check_keys(stft_sec, _STFT_KEYS, "[fingerprint.stft]")
    band_low = sec.get("band_low_hz")
    band_high = sec.get("band_high_hz")
    params = FingerprintParams(
        window_len_s=_num(sec, "window_len_s", 30.0, "fingerprint"),
        window_lag_s=_num(sec, "window_lag_s", 2.0, "fingerprint"),
        freq_bins=_intval(sec, "freq_bins", 32, "fingerprint"),
        time_bins=_intval(sec, "time_bins", 128, "fingerprint"),
        top_k=_intval(sec, "top_k", 800, "fingerprint"),
        band_low_hz=None if band_low is None else float(band_low),
        band_high_hz=None if band_high is None else float(band_high),
        stft=StftParams(
            frame_len_s=_num(stft_sec, "frame_len_s", 2.0, "stft"),
            hop_s=_num(stft_sec, "hop_s", 0.2, "stft"),
        ),
    )
    params.validate()
    mad_rate = _num(sec, "mad_rate", 0.1, "fingerprint")
    if not 0 < mad_rate <= 1:
        raise ParameterError("fingerprint.mad_rate must be in (0, 1]")
    return params, mad_rate


def _search_config(sec: dict, seed: int) -> SearchConfig:
    _check_keys(sec, _SEARCH_KEYS, "[search]")
    if "profile" in sec:
        if "hash_funcs" in sec or "min_matches" in sec:
            raise ParameterError(
                "search.profile and explicit hash_funcs/min_matches conflict")
        profile = sec["profile"]
        if profile not in PROFILES:
            raise ParameterError(
                f"unknown search profile {profile!r}; "
                f"known: {', '.join(sorted(PROFILES))}")
        hash_funcs, min_matches = PROFILES[profile]
    else:
        hash_funcs = _intval(sec, "hash_funcs", 6, "search")
        min_matches = _intval(sec, "min_matches", 5, "search")
    excl = sec.get("near_repeat_exclusion_s")
    occ = sec.get("occurrence_threshold")
    cfg = SearchConfig(
        tables=_intval(sec, "tables", 100, "search"),
        hash_funcs=hash_funcs,
        min_matches=min_matches,
        seed=seed,
        partitions=_intval(sec, "partitions", 1, "search"),
        near_repeat_exclusion_s=None if excl is None else float(excl),
        occurrence_threshold=None if occ is None else float(occ),
    )
    cfg.validate()
    return cfg


def _align_params(sec: dict) -> AlignParams:
    _check_keys(sec, _ALIGN_KEYS, "[align]")
    params = AlignParams(
        station_threshold=_intval(sec, "station_threshold", 3, "align"),
        gap=_intval(sec, "gap", 3, "align"),
        max_width=_intval(sec, "max_width", 3, "align"),
        min_size=_intval(sec, "min_size", 3, "align"),
        min_stations=_intval(sec, "min_stations", 2, "align"),
        dt_tol_s=_num(sec, "dt_tol_s", 2.0, "align"),
        start_tol_s=_num(sec, "start_tol_s", 15.0, "align"),
    )
    params.validate()
    return params


def _station_configs(entries) -> list[StationConfig]:
    if not isinstance(entries, list) or not entries:
        raise ParameterError("config needs at least one [[station]] block")
    out = []
    for sec in entries:
        _check_keys(sec, _STATION_KEYS, "[[station]]")
        if "id" not in sec or not isinstance(sec["id"], str):
            raise ParameterError("every [[station]] needs a string id")
        channels = sec.get("channels")
        if (not isinstance(channels, list) or not channels
                or not all(isinstance(c, str) for c in channels)):
            raise ParameterError(
                f"station {sec['id']}: channels must be a non-empty "
                "array of paths")
        low, high = sec.get("bandpass_low_hz"), sec.get("bandpass_high_hz")
        if (low is None) != (high is None):
            raise ParameterError(
                f"station {sec['id']}: bandpass corners must come together")
        bp = None
        if low is not None:
            bp = BandpassSpec(float(low), float(high),
                              order=_intval(sec, "bandpass_order", 4,
                                            "station"))
        out.append(StationConfig(sec["id"], list(channels), bp))
    ids = [st.station_id for st in out]
    if len(set(ids)) != len(ids):
        raise ParameterError("duplicate station ids in config")
    return out


def _build_synth(sec: dict, seed: int) -> SynthSpec:
    _check_keys(sec, _SYNTH_KEYS, "[synth]")
    stations = []
    for s in sec.get("station", []):
        _check_keys(s, _SYNTH_STATION_KEYS, "[[synth.station]]")
        if "id" not in s:
            raise ParameterError("every [[synth.station]] needs an id")
        stations.append(StationSpec(
            station_id=s["id"],
            delay_s=_num(s, "delay_s", 0.0, "synth.station"),
            n_channels=_intval(s, "channels", 1, "synth.station"),
        ))
    sources = []
    for s in sec.get("source", []):
        _check_keys(s, _SYNTH_SOURCE_KEYS, "[[synth.source]]")
        if "id" not in s:
            raise ParameterError("every [[synth.source]] needs an id")
        amp = s.get("amplitude")
        width = s.get("band_width_hz")
        sources.append(SourceSpec(
            source_id=s["id"],
            occurrences=[float(x) for x in s.get("occurrences", [])],
            kind=s.get("kind", "ricker"),
            center_hz=_num(s, "center_hz", 8.0, "synth.source"),
            duration_s=_num(s, "duration_s", 5.0, "synth.source"),
            amplitude=None if amp is None else float(amp),
            band_width_hz=None if width is None else float(width),
        ))
    if not stations:
        raise ParameterError("[synth] needs at least one [[synth.station]]")
    spec = SynthSpec(
        duration_s=_num(sec, "duration_s", 600.0, "synth"),
        sample_rate_hz=_num(sec, "sample_rate_hz", 100.0, "synth"),
        rng_seed=seed,
        noise_sigma=_num(sec, "noise_sigma", 1.0, "synth"),
        snr=_num(sec, "snr", 2.0, "synth"),
        start_epoch_s=_num(sec, "start_epoch_s", 0.0, "synth"),
        noise_color=sec.get("noise_color", "white"),
        noise_floor_frac=_num(sec, "noise_floor_frac", 0.06, "synth"),
        stations=stations,
        sources=sources,
    )
    check_occurrences(spec)
    return spec


def semantic_hash(doc: dict) -> str:
    """sha256 of the canonical JSON form of the hash-relevant fields."""
    semantic = copy.deepcopy(doc)
    for key in ("out_dir", "data_dir", "workers"):
        semantic.pop(key, None)
    if isinstance(semantic.get("search"), dict):
        semantic["search"].pop("partitions", None)
    blob = json.dumps(semantic, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _resolve(base: str, path: str) -> str:
    return os.path.normpath(path if os.path.isabs(path)
                            else os.path.join(base, path))


def load_config(path, out: str | None = None, workers: int | None = None,
                seed: int | None = None) -> PipelineConfig:
    """Parse, validate, and hash a config file.

    `out` and `workers` override their config fields without changing
    the config hash; `seed` overrides all three seeds and does change
    it (a different seed is a different run).
    """
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ParameterError(f"cannot read config {path}: {exc}") from exc
    doc = parse_toml(text)
    _check_keys(doc, _TOP_KEYS, "config")
    seeds_sec = doc.get("seeds", {})
    _check_keys(seeds_sec, _SEED_KEYS, "[seeds]")
    if seed is not None:
        seeds_sec = {k: int(seed) for k in sorted(_SEED_KEYS)}
        doc["seeds"] = seeds_sec
    seeds = {k: _intval(seeds_sec, k, 0, "seeds") for k in sorted(_SEED_KEYS)}

    cfg_hash = semantic_hash(doc)
    base = os.path.dirname(os.path.abspath(path))
    out_dir = out if out is not None else doc.get("out_dir", "qs_out")
    if not isinstance(out_dir, str):
        raise ParameterError("out_dir must be a string")
    # command-line paths anchor at the working directory, config paths
    # at the config file
    out_dir = _resolve(os.getcwd() if out is not None else base, out_dir)
    data_dir = doc.get("data_dir")
    if data_dir is None:
        data_dir = out_dir
    elif isinstance(data_dir, str):
        data_dir = _resolve(base, data_dir)
    else:
        raise ParameterError("data_dir must be a string")
    n_workers = workers if workers is not None \
        else _intval(doc, "workers", 1, "config")
    if n_workers < 1:
        raise ParameterError("workers must be >= 1")

    params, mad_rate = _fingerprint_params(doc.get("fingerprint", {}))
    cfg = PipelineConfig(
        config_hash=cfg_hash,
        out_dir=out_dir,
        data_dir=data_dir,
        workers=n_workers,
        seeds=seeds,
        mad_rate=mad_rate,
        fingerprint=params,
        search=_search_config(doc.get("search", {}), seeds["search"]),
        align=_align_params(doc.get("align", {})),
        stations=_station_configs(doc.get("station")),
        synth=doc.get("synth"),
    )
    if cfg.synth is not None:
        cfg.synth_spec()  # validate the section eagerly
    return cfg


# ---------------------------------------------------------------------------
# stage manifests and cross-stage identity checks

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_canonical(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def write_manifest(cfg: PipelineConfig, stage: str, output_path: str,
                   inputs: list[str], outputs: list[str],
                   extra: dict | None = None) -> str:
    """Write `<output>.manifest.json` recording config hash and IO hashes.

    Paths are stored relative to out_dir so a relocated run keeps
    byte-identical manifests. No timestamps: reruns must reproduce the
    file exactly.
    """
    def rel(p):
        return os.path.relpath(p, cfg.out_dir)

    doc = {
        "stage": stage,
        "config_hash": cfg.config_hash,
        "inputs": {rel(p): file_sha256(p) for p in inputs},
        "outputs": {rel(p): file_sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    path = f"{output_path}.manifest.json"
    write_json_canonical(path, doc)
    return path


def require_config_match(header: dict, cfg: PipelineConfig, path) -> None:
    got = header.get("config_hash")
    if got != cfg.config_hash:
        raise ConsistencyError(
            f"{path} was produced under config {got}, "
            f"current config is {cfg.config_hash}")
