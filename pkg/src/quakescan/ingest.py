"""Time series containers, disk format, band-pass filtering, and synthesis.

Continuous data lives on disk as a raw little-endian float32 stream
(`<name>.f32le`) next to a JSON sidecar (`<name>.json`) holding exactly the
metadata needed to interpret it: station, channel, sample_rate_hz,
start_epoch_s, n_samples.

The synthesizer builds multi-station test data with known ground truth:
independent noise per channel plus repeating source templates injected at
scheduled times, arriving at each station with that station's fixed delay.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .errors import ConsistencyError, CorruptInputError, DataError, FormatError, ParameterError

SIDECAR_KEYS = ("station", "channel", "sample_rate_hz", "start_epoch_s", "n_samples")


@dataclass
class TimeSeries:
    """A single channel of evenly sampled data."""

    station_id: str
    channel_id: str
    sample_rate_hz: float
    start_epoch_s: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ParameterError("samples must be 1-D")
        if not self.sample_rate_hz > 0:
            raise ParameterError("sample_rate_hz must be positive")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def end_epoch_s(self) -> float:
        return self.start_epoch_s + self.duration_s


@dataclass
class BandpassSpec:
    """Zero-phase Butterworth band-pass corner frequencies."""

    low_hz: float
    high_hz: float
    order: int = 4

    def validate(self, sample_rate_hz: float) -> None:
        nyq = sample_rate_hz / 2.0
        if not 0 < self.low_hz < self.high_hz < nyq:
            raise ParameterError(
                f"need 0 < low < high < Nyquist ({nyq} Hz), "
                f"got [{self.low_hz}, {self.high_hz}]"
            )
        if self.order < 1:
            raise ParameterError("filter order must be >= 1")


def bandpass(ts: TimeSeries, spec: BandpassSpec) -> TimeSeries:
    """Forward-backward Butterworth band-pass (zero phase distortion)."""
    spec.validate(ts.sample_rate_hz)
    sos = signal.butter(spec.order, [spec.low_hz, spec.high_hz],
                        btype="bandpass", fs=ts.sample_rate_hz, output="sos")
    try:
        filtered = signal.sosfiltfilt(sos, ts.samples)
    except ValueError as exc:
        raise DataError(f"series too short to filter: {exc}") from exc
    return TimeSeries(ts.station_id, ts.channel_id, ts.sample_rate_hz,
                      ts.start_epoch_s, filtered)


def _strip_suffix(path) -> str:
    path = os.fspath(path)
    for suffix in (".f32le", ".json"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def save_timeseries(ts: TimeSeries, path) -> tuple[str, str]:
    """Write `<base>.f32le` and its JSON sidecar; returns both paths."""
    base = _strip_suffix(path)
    data_path, meta_path = base + ".f32le", base + ".json"
    ts.samples.astype("<f4").tofile(data_path)
    sidecar = {
        "station": ts.station_id,
        "channel": ts.channel_id,
        "sample_rate_hz": ts.sample_rate_hz,
        "start_epoch_s": ts.start_epoch_s,
        "n_samples": ts.n_samples,
    }
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, separators=(",", ":"))
    return data_path, meta_path


def load_timeseries(path) -> TimeSeries:
    """Load a `<base>.f32le` + `<base>.json` pair (either path accepted)."""
    base = _strip_suffix(path)
    data_path, meta_path = base + ".f32le", base + ".json"
    if not os.path.exists(meta_path):
        raise FormatError(f"missing sidecar {meta_path}")
    if not os.path.exists(data_path):
        raise FormatError(f"missing data file {data_path}")
    with open(meta_path, encoding="utf-8") as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as exc:
            raise CorruptInputError(f"unreadable sidecar {meta_path}: {exc}") from exc
    missing = [k for k in SIDECAR_KEYS if k not in meta]
    if missing:
        raise ConsistencyError(f"sidecar {meta_path} missing keys {missing}")
    n = int(meta["n_samples"])
    size = os.path.getsize(data_path)
    if size != 4 * n:
        raise CorruptInputError(
            f"{data_path} is {size} bytes, sidecar says {n} samples ({4 * n} bytes)"
        )
    samples = np.fromfile(data_path, dtype="<f4", count=n).astype(np.float64)
    return TimeSeries(
        station_id=str(meta["station"]),
        channel_id=str(meta["channel"]),
        sample_rate_hz=float(meta["sample_rate_hz"]),
        start_epoch_s=float(meta["start_epoch_s"]),
        samples=samples,
    )


# ---------------------------------------------------------------------------
# synthesis

@dataclass
class SourceSpec:
    """One repeating source: a waveform template and its occurrence times.

    occurrences are in seconds from the start of the synthesized record.
    Template kinds: 'ricker' (zero-phase wavelet at center_hz), 'damped_sine',
    and 'bandnoise' (band-limited noise unique to the source, so different
    sources are mutually dissimilar).

    band_width_hz narrows the bandnoise band to center +- width/2; when
    None the band spans 0.6x to 1.4x of center_hz.
    """

    source_id: str
    occurrences: list = field(default_factory=list)
    kind: str = "ricker"
    center_hz: float = 8.0
    duration_s: float = 5.0
    amplitude: float | None = None
    band_width_hz: float | None = None


@dataclass
class StationSpec:
    station_id: str
    delay_s: float = 0.0
    n_channels: int = 1


@dataclass
class SynthSpec:
    """Deterministic multi-station synthetic dataset description.

    snr is the ratio of event peak amplitude to total ambient sigma.
    noise_color 'white' is flat Gaussian noise; 'field' mimics a seismic
    station, where most ambient power is microseism below ~1.2 Hz and only
    noise_floor_frac of it is a flat floor across the band. Detectability
    at a given snr therefore depends on noise_color: a peak at 2 sigma is
    hopeless against a white floor but clear against a field floor.
    """

    duration_s: float
    sample_rate_hz: float = 100.0
    rng_seed: int = 0
    noise_sigma: float = 1.0
    snr: float = 2.0
    start_epoch_s: float = 0.0
    noise_color: str = "white"
    noise_floor_frac: float = 0.06
    stations: list = field(default_factory=lambda: [StationSpec("ST0")])
    sources: list = field(default_factory=list)


def _template(source: SourceSpec, sample_rate_hz: float, rng_seed: int,
              source_index: int) -> np.ndarray:
    n = max(2, int(round(source.duration_s * sample_rate_hz)))
    t = np.arange(n) / sample_rate_hz
    if source.kind == "ricker":
        tau = t - source.duration_s / 2.0
        a = (np.pi * source.center_hz * tau) ** 2
        w = (1.0 - 2.0 * a) * np.exp(-a)
    elif source.kind == "damped_sine":
        w = np.sin(2 * np.pi * source.center_hz * t) * np.exp(-4.0 * t / source.duration_s)
    elif source.kind == "bandnoise":
        rng = np.random.default_rng([rng_seed, 0x5EED, source_index])
        raw = rng.standard_normal(n)
        if source.band_width_hz is not None:
            if source.band_width_hz <= 0:
                raise ParameterError("band_width_hz must be positive")
            low = source.center_hz - source.band_width_hz / 2
            high = source.center_hz + source.band_width_hz / 2
        else:
            low = 0.6 * source.center_hz
            high = 1.4 * source.center_hz
        high = min(high, 0.45 * sample_rate_hz)
        if not 0 < low < high:
            raise ParameterError(
                f"source {source.source_id} band [{low}, {high}] invalid")
        sos = signal.butter(4, [low, high], btype="bandpass",
                            fs=sample_rate_hz, output="sos")
        w = signal.sosfiltfilt(sos, raw)
        w *= signal.windows.tukey(n, alpha=0.25)
    else:
        raise ParameterError(f"unknown template kind {source.kind!r}")
    peak = np.abs(w).max()
    if peak == 0:
        raise ParameterError(f"source {source.source_id} template is all zero")
    return w / peak


def check_occurrences(spec: SynthSpec) -> None:
    """Bounds-check every injected arrival without building templates."""
    if spec.duration_s <= 0:
        raise ParameterError("duration_s must be positive")
    n = int(round(spec.duration_s * spec.sample_rate_hz))
    for src in spec.sources:
        tpl_len = max(2, int(round(src.duration_s * spec.sample_rate_hz)))
        for st in spec.stations:
            for occ in src.occurrences:
                start = int(round((occ + st.delay_s) * spec.sample_rate_hz))
                if start < 0 or start + tpl_len > n:
                    raise ParameterError(
                        f"source {src.source_id} occurrence at {occ} s falls "
                        f"outside the record at station {st.station_id}")


_MICROSEISM_BAND = (0.05, 1.2)


def _ambient_noise(spec: SynthSpec, rng: np.random.Generator,
                   n: int) -> np.ndarray:
    white = rng.standard_normal(n)
    if spec.noise_color == "white":
        return spec.noise_sigma * white
    if spec.noise_color != "field":
        raise ParameterError(f"unknown noise_color {spec.noise_color!r}")
    frac = spec.noise_floor_frac
    if not 0.0 < frac <= 1.0:
        raise ParameterError("noise_floor_frac must be in (0, 1]")
    if _MICROSEISM_BAND[1] >= spec.sample_rate_hz / 2:
        raise ParameterError("sample rate too low for field noise model")
    slow = rng.standard_normal(n)
    sos = signal.butter(4, _MICROSEISM_BAND, btype="bandpass",
                        fs=spec.sample_rate_hz, output="sos")
    slow = signal.sosfiltfilt(sos, slow)
    std = slow.std()
    if std == 0:
        raise DataError("degenerate microseism component")
    slow /= std
    return spec.noise_sigma * (np.sqrt(1.0 - frac) * slow
                               + np.sqrt(frac) * white)


def synthesize(spec: SynthSpec) -> list[TimeSeries]:
    """Build one TimeSeries per station channel, station-major order.

    Noise is independent per channel; every channel of a station carries the
    same injected arrivals (occurrence time + station delay). The result is a
    pure function of the spec, byte-stable across runs.
    """
    check_occurrences(spec)
    n = int(round(spec.duration_s * spec.sample_rate_hz))
    templates = [
        _template(src, spec.sample_rate_hz, spec.rng_seed, i)
        for i, src in enumerate(spec.sources)
    ]
    out = []
    for si, st in enumerate(spec.stations):
        injected = np.zeros(n)
        for src, tpl in zip(spec.sources, templates):
            amp = src.amplitude if src.amplitude is not None else spec.snr * spec.noise_sigma
            for occ in src.occurrences:
                start = int(round((occ + st.delay_s) * spec.sample_rate_hz))
                injected[start:start + len(tpl)] += amp * tpl
        for ci in range(max(1, st.n_channels)):
            rng = np.random.default_rng([spec.rng_seed, si, ci])
            samples = injected + _ambient_noise(spec, rng, n)
            out.append(TimeSeries(
                station_id=st.station_id,
                channel_id=f"CH{ci}",
                sample_rate_hz=spec.sample_rate_hz,
                start_epoch_s=spec.start_epoch_s,
                samples=samples,
            ))
    return out


def spectrogram_preview(ts: TimeSeries, window_s: float,
                        out) -> tuple[str, str]:
    """Quick-look log-power spectrogram written as `<out>.csv` + `<out>.svg`.

    Rows run from 0 Hz to Nyquist, columns are half-overlapping frames
    of window_s seconds; meant for choosing a bandpass by eye before
    committing to analysis parameters. Returns the two paths written.
    """
    # deferred: fingerprint imports this module at load
    from .fingerprint import _LOG_EPS, write_spectrogram_csv, write_spectrogram_svg

    if window_s > ts.duration_s:
        raise ParameterError("preview window exceeds the series duration")
    frame = int(round(window_s * ts.sample_rate_hz))
    if frame < 2:
        raise ParameterError("preview window shorter than one STFT frame")
    hop = max(1, frame // 2)
    freqs, times, power = signal.spectrogram(
        ts.samples, fs=ts.sample_rate_hz, window="hann",
        nperseg=frame, noverlap=frame - hop)
    logpow = np.log10(power + _LOG_EPS)
    csv_path, svg_path = f"{out}.csv", f"{out}.svg"
    write_spectrogram_csv(csv_path, freqs, times + ts.start_epoch_s, logpow)
    write_spectrogram_svg(svg_path, freqs, times + ts.start_epoch_s, logpow)
    return csv_path, svg_path


def event_arrivals(spec: SynthSpec) -> list[dict]:
    """Ground truth: one record per (source occurrence, station)."""
    truth = []
    for src in spec.sources:
        for oi, occ in enumerate(src.occurrences):
            for st in spec.stations:
                truth.append({
                    "source_id": src.source_id,
                    "occurrence_index": oi,
                    "station_id": st.station_id,
                    "arrival_epoch_s": spec.start_epoch_s + occ + st.delay_s,
                    "duration_s": src.duration_s,
                })
    return truth
