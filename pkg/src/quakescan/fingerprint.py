"""Waveform fingerprinting: spectral images, Haar features, top-K binarization.

The chain per overlapping window of a continuous channel:

1. short-time spectrogram of the whole series (windows share columns),
   truncated to the band-pass corners,
2. fixed-shape spectral image per window (area-weighted resample to
   freq_bins x time_bins),
3. full 2-D orthonormal Haar decomposition of the image,
4. per-coefficient deviation score v' = (v - median) / MAD, with the
   median/MAD estimated once per channel from a random sample of windows,
5. keep the top_k coefficients by |v'| (ties broken toward the lower
   coefficient index) and encode each survivor's sign into one of two bits:
   bit 2j for v' >= 0, bit 2j+1 for v' < 0.

The result is a sparse binary fingerprint with exactly top_k of
d = 2 * freq_bins * time_bins bits set, ready for Min-Max hashing.
"""

import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _container
from .errors import ConsistencyError, CorruptInputError, DataError, ParameterError
from .ingest import TimeSeries

FP_MAGIC = b"QSFP0001"
MAD_MAGIC = b"QSMD0001"
_FP_KIND = "fingerprint"
_MAD_KIND = "mad-stats"

_LOG_EPS = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)

# coefficient sample larger than this is spooled to a temporary memmap
_MAD_RAM_BYTES = 2_000_000_000


@dataclass
class StftParams:
    """Spectrogram geometry in seconds (converted per channel sample rate)."""

    frame_len_s: float = 2.0
    hop_s: float = 0.2


@dataclass
class FingerprintParams:
    window_len_s: float = 30.0
    window_lag_s: float = 2.0
    freq_bins: int = 32
    time_bins: int = 128
    top_k: int = 800
    band_low_hz: float | None = None
    band_high_hz: float | None = None
    stft: StftParams = field(default_factory=StftParams)

    @property
    def n_coeffs(self) -> int:
        return self.freq_bins * self.time_bins

    @property
    def d(self) -> int:
        """Fingerprint dimensionality: two sign bits per Haar coefficient."""
        return 2 * self.n_coeffs

    def validate(self) -> None:
        if self.window_lag_s <= 0 or self.window_len_s <= 0:
            raise ParameterError("window length and lag must be positive")
        if self.window_lag_s > self.window_len_s:
            raise ParameterError("window lag must not exceed window length")
        if self.freq_bins < 1 or self.time_bins < 1:
            raise ParameterError("spectral image shape must be at least 1x1")
        if not 1 <= self.top_k <= self.n_coeffs:
            raise ParameterError(
                f"top_k must be in [1, {self.n_coeffs}], got {self.top_k}"
            )
        if (self.band_low_hz is None) != (self.band_high_hz is None):
            raise ParameterError("band corners must be given together")
        if self.band_low_hz is not None and not 0 < self.band_low_hz < self.band_high_hz:
            raise ParameterError("need 0 < band_low_hz < band_high_hz")
        if self.stft.frame_len_s <= 0 or self.stft.hop_s <= 0:
            raise ParameterError("STFT frame and hop must be positive")


@dataclass
class SpectralImage:
    window_index: int
    start_epoch_s: float
    values: np.ndarray  # (freq_bins, time_bins) float32


@dataclass
class MadStats:
    """Per-coefficient median and median absolute deviation.

    Coefficients whose MAD is zero carry no usable deviation signal and are
    excluded from top-K selection downstream.
    """

    median: np.ndarray
    mad: np.ndarray
    rate: float
    seed: int
    n_sampled: int
    n_total: int

    @property
    def eligible(self) -> np.ndarray:
        return self.mad > 0

    @property
    def n_coeffs(self) -> int:
        return self.median.shape[0]


# ---------------------------------------------------------------------------
# spectrogram

def _stft_geometry(ts: TimeSeries, params: FingerprintParams):
    sr = ts.sample_rate_hz
    frame = int(round(params.stft.frame_len_s * sr))
    hop = max(1, int(round(params.stft.hop_s * sr)))
    if frame < 2:
        raise ParameterError("STFT frame shorter than 2 samples")
    if ts.n_samples < frame:
        raise DataError("series shorter than one STFT frame")
    return frame, hop


def _stft_time_major(ts: TimeSeries, params: FingerprintParams):
    """Log-power spectrogram, frames-major: (n_cols, n_freqs) float32."""
    frame, hop = _stft_geometry(ts, params)
    taper = np.hanning(frame)
    n_cols = (ts.n_samples - frame) // hop + 1
    n_freqs = frame // 2 + 1
    out = np.empty((n_cols, n_freqs), dtype=np.float32)
    frames = np.lib.stride_tricks.sliding_window_view(ts.samples, frame)[::hop]
    chunk = max(1, 8_000_000 // frame)
    for c0 in range(0, n_cols, chunk):
        c1 = min(n_cols, c0 + chunk)
        spec = np.fft.rfft(frames[c0:c1] * taper, axis=1)
        power = spec.real**2 + spec.imag**2
        out[c0:c1] = np.log10(power + _LOG_EPS, dtype=np.float64).astype(np.float32)
    freqs = np.fft.rfftfreq(frame, 1.0 / ts.sample_rate_hz)
    return out, freqs, frame, hop


def spectrogram(ts: TimeSeries, params: FingerprintParams | None = None):
    """Full-series log-power spectrogram.

    Returns (freqs_hz, column_epochs_s, logpow) with logpow shaped
    (n_freqs, n_cols); column epochs are frame start times.
    """
    params = params or FingerprintParams()
    out, freqs, frame, hop = _stft_time_major(ts, params)
    times = ts.start_epoch_s + np.arange(out.shape[0]) * (hop / ts.sample_rate_hz)
    return freqs, times, np.ascontiguousarray(out.T)


def _band_rows(freqs: np.ndarray, params: FingerprintParams):
    if params.band_low_hz is None:
        return 0, len(freqs)
    keep = np.flatnonzero((freqs >= params.band_low_hz - 1e-9)
                          & (freqs <= params.band_high_hz + 1e-9))
    if keep.size == 0:
        raise ParameterError("no spectrogram rows inside configured band")
    return int(keep[0]), int(keep[-1]) + 1


@lru_cache(maxsize=64)
def _resize_weights(src: int, dst: int) -> np.ndarray:
    """Area-overlap resampling matrix (dst, src); every row sums to 1."""
    r = src / dst
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * r, (i + 1) * r
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), src)):
            w[i, j] = (min(hi, j + 1) - max(lo, j)) / r
    w.setflags(write=False)
    return w


def n_windows(ts: TimeSeries, params: FingerprintParams) -> int:
    sr = ts.sample_rate_hz
    win = int(round(params.window_len_s * sr))
    lag = max(1, int(round(params.window_lag_s * sr)))
    if ts.n_samples < win:
        return 0
    return (ts.n_samples - win) // lag + 1


def iter_image_batches(ts: TimeSeries, params: FingerprintParams,
                       indices=None, batch: int = 512):
    """Yield (window_indices, start_epochs, images) in fixed-size batches.

    images is (B, freq_bins, time_bins) float32. `indices` restricts and
    orders the windows computed (used by MAD sampling); default is all
    windows in order.
    """
    params.validate()
    sr = ts.sample_rate_hz
    win = int(round(params.window_len_s * sr))
    lag = max(1, int(round(params.window_lag_s * sr)))
    total = n_windows(ts, params)
    if total == 0:
        raise DataError("series shorter than one fingerprint window")
    spec_t, freqs, frame, hop = _stft_time_major(ts, params)
    if win < frame:
        raise ParameterError("fingerprint window shorter than one STFT frame")
    r0, r1 = _band_rows(freqs, params)
    spec_t = np.ascontiguousarray(spec_t[:, r0:r1])
    w_f = _resize_weights(r1 - r0, params.freq_bins)
    if indices is None:
        indices = np.arange(total)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= total):
        raise ParameterError("window index out of range")
    for b0 in range(0, indices.size, batch):
        idx = indices[b0: b0 + batch]
        offs = idx * lag
        c0 = -(-offs // hop)  # ceil
        c1 = (offs + win - frame) // hop + 1
        widths = c1 - c0
        if widths.min() < 1:
            raise ParameterError("window contains no complete STFT frame")
        images = np.empty((idx.size, params.freq_bins, params.time_bins),
                          dtype=np.float32)
        for width in np.unique(widths):
            rows = np.flatnonzero(widths == width)
            cols = c0[rows, None] + np.arange(width)
            gathered = spec_t[cols]  # (B_w, width, nf_band)
            w_t = _resize_weights(int(width), params.time_bins)
            images[rows] = np.einsum(
                "bwf,Ff,Tw->bFT", gathered, w_f, w_t, optimize=True
            ).astype(np.float32)
        epochs = ts.start_epoch_s + idx * params.window_lag_s
        yield idx, epochs, images


def compute_spectral_images(ts: TimeSeries, params: FingerprintParams):
    """Generator of SpectralImage over all windows of a channel."""
    for idx, epochs, images in iter_image_batches(ts, params):
        for i, e, v in zip(idx, epochs, images):
            yield SpectralImage(int(i), float(e), v)


# ---------------------------------------------------------------------------
# 2-D Haar transform

def _haar_schedule(h: int, w: int):
    steps = []
    while h % 2 == 0 and h > 1 and w % 2 == 0 and w > 1:
        steps.append((h, w, "hw"))
        h //= 2
        w //= 2
    while w % 2 == 0 and w > 1:
        steps.append((h, w, "w"))
        w //= 2
    while h % 2 == 0 and h > 1:
        steps.append((h, w, "h"))
        h //= 2
    return steps


def haar2d(a) -> np.ndarray:
    """Full orthonormal 2-D Haar decomposition of (..., H, W) arrays.

    Standard multi-level layout: each level transforms rows then columns of
    the current approximation block, which shrinks by half per axis; once one
    axis is exhausted the remaining axis keeps halving. Power-of-two sides
    decompose down to a single approximation coefficient. Orthonormal, so
    energy is preserved and ihaar2d inverts exactly.
    """
    out = np.array(a, dtype=np.float64, copy=True)
    if out.ndim < 2:
        raise ParameterError("haar2d needs at least a 2-D array")
    for h, w, mode in _haar_schedule(out.shape[-2], out.shape[-1]):
        if mode in ("hw", "w"):
            blk = out[..., :h, :w]
            ev, od = blk[..., 0::2], blk[..., 1::2]
            s = (ev + od) * _INV_SQRT2
            d = (ev - od) * _INV_SQRT2
            out[..., :h, : w // 2] = s
            out[..., :h, w // 2: w] = d
        if mode in ("hw", "h"):
            # the column pass spans the full block width, detail columns
            # included; only the LL quadrant is revisited next level
            blk = out[..., :h, :w]
            ev, od = blk[..., 0::2, :], blk[..., 1::2, :]
            s = (ev + od) * _INV_SQRT2
            d = (ev - od) * _INV_SQRT2
            out[..., : h // 2, :w] = s
            out[..., h // 2: h, :w] = d
    return out


def ihaar2d(a) -> np.ndarray:
    """Inverse of haar2d."""
    out = np.array(a, dtype=np.float64, copy=True)
    if out.ndim < 2:
        raise ParameterError("ihaar2d needs at least a 2-D array")
    for h, w, mode in reversed(_haar_schedule(out.shape[-2], out.shape[-1])):
        if mode in ("hw", "h"):
            s = out[..., : h // 2, :w]
            d = out[..., h // 2: h, :w]
            ev = (s + d) * _INV_SQRT2
            od = (s - d) * _INV_SQRT2
            out[..., 0:h:2, :w] = ev
            out[..., 1:h:2, :w] = od
        if mode in ("hw", "w"):
            s = out[..., :h, : w // 2]
            d = out[..., :h, w // 2: w]
            ev = (s + d) * _INV_SQRT2
            od = (s - d) * _INV_SQRT2
            out[..., :h, 0:w:2] = ev
            out[..., :h, 1:w:2] = od
    return out


def iter_coeff_batches(ts: TimeSeries, params: FingerprintParams,
                       indices=None, batch: int = 512):
    """Yield (window_indices, epochs, coeffs) with coeffs (B, n_coeffs) f32.

    Coefficients are the row-major flattened Haar decomposition of each
    spectral image, computed in float64 and stored as float32.
    """
    for idx, epochs, images in iter_image_batches(ts, params, indices, batch):
        coeffs = haar2d(images).reshape(idx.size, -1).astype(np.float32)
        yield idx, epochs, coeffs


# ---------------------------------------------------------------------------
# MAD statistics

def estimate_mad(ts: TimeSeries, params: FingerprintParams,
                 rate: float = 0.1, seed: int = 0,
                 batch: int = 512) -> MadStats:
    """Median and MAD per Haar coefficient from a random sample of windows.

    `rate` is the fraction of windows sampled (without replacement); 1.0
    reproduces the exhaustive statistics exactly. The sample is drawn with a
    dedicated RNG seed so reruns are identical.
    """
    params.validate()
    if not 0 < rate <= 1:
        raise ParameterError(f"sampling rate must be in (0, 1], got {rate}")
    total = n_windows(ts, params)
    if total == 0:
        raise DataError("series shorter than one fingerprint window")
    n_sample = max(1, int(round(rate * total)))
    if n_sample >= total:
        sample = np.arange(total)
        n_sample = total
    else:
        rng = np.random.default_rng(seed)
        sample = np.sort(rng.choice(total, size=n_sample, replace=False))
    n_coeffs = params.n_coeffs
    need = n_sample * n_coeffs * 4
    if need <= _MAD_RAM_BYTES:
        spool = np.empty((n_sample, n_coeffs), dtype=np.float32)
        tmp = None
    else:
        tmp = tempfile.NamedTemporaryFile(prefix="quakescan-mad-", suffix=".f32")
        spool = np.memmap(tmp.name, dtype=np.float32, mode="w+",
                          shape=(n_sample, n_coeffs))
    row = 0
    for _, _, coeffs in iter_coeff_batches(ts, params, sample, batch):
        spool[row: row + coeffs.shape[0]] = coeffs
        row += coeffs.shape[0]
    median = np.empty(n_coeffs)
    mad = np.empty(n_coeffs)
    col_chunk = max(1, 64_000_000 // max(1, 8 * n_sample))
    for j0 in range(0, n_coeffs, col_chunk):
        j1 = min(n_coeffs, j0 + col_chunk)
        cols = np.asarray(spool[:, j0:j1], dtype=np.float64)
        med = np.median(cols, axis=0)
        median[j0:j1] = med
        mad[j0:j1] = np.median(np.abs(cols - med), axis=0)
    if tmp is not None:
        del spool
        tmp.close()
    return MadStats(median=median, mad=mad, rate=float(rate), seed=int(seed),
                    n_sampled=int(n_sample), n_total=int(total))


def write_mad_file(path, stats: MadStats, extra: dict | None = None) -> None:
    header = {
        "rate": stats.rate,
        "seed": stats.seed,
        "n_sampled": stats.n_sampled,
        "n_total": stats.n_total,
    }
    if extra:
        header.update(extra)
    with open(path, "wb") as f:
        _container.write_preamble(f, MAD_MAGIC, header, count=stats.n_coeffs)
        f.write(stats.median.astype("<f8").tobytes())
        f.write(stats.mad.astype("<f8").tobytes())


def read_mad_file(path) -> tuple[MadStats, dict]:
    with open(path, "rb") as f:
        header, count, off = _container.read_preamble(f, MAD_MAGIC, _MAD_KIND)
        size = os.fstat(f.fileno()).st_size
        _container.check_payload_size(size, off, count, 16, _MAD_KIND)
        median = np.fromfile(f, dtype="<f8", count=count)
        mad = np.fromfile(f, dtype="<f8", count=count)
    stats = MadStats(median=median, mad=mad,
                     rate=float(header.get("rate", 1.0)),
                     seed=int(header.get("seed", 0)),
                     n_sampled=int(header.get("n_sampled", count)),
                     n_total=int(header.get("n_total", count)))
    return stats, header


# ---------------------------------------------------------------------------
# normalization and binarization

def normalize(coeffs, stats: MadStats) -> np.ndarray:
    """Deviation scores v' = (v - median) / MAD; zero-MAD columns give 0."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    safe = np.where(stats.eligible, stats.mad, 1.0)
    scores = (coeffs - stats.median) / safe
    return np.where(stats.eligible, scores, 0.0)


def topk_bits(coeffs, stats: MadStats, top_k: int) -> np.ndarray:
    """Sign-encoded bit indices of the top_k most anomalous coefficients.

    coeffs is (B, n_coeffs); the result is (B, top_k) uint32, ascending per
    row. Selection is by |v'| with ties going to the lower coefficient index;
    zero-MAD coefficients are never selected. Sign encoding: coefficient j
    maps to bit 2j when v' >= 0 and to bit 2j+1 when v' < 0.
    """
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    n = coeffs.shape[1]
    if n != stats.n_coeffs:
        raise ParameterError("coefficient count does not match MAD stats")
    n_eligible = int(stats.eligible.sum())
    if not 1 <= top_k <= n:
        raise ParameterError(f"top_k must be in [1, {n}]")
    if top_k > n_eligible:
        raise ParameterError(
            f"top_k={top_k} exceeds {n_eligible} coefficients with nonzero MAD"
        )
    if not np.isfinite(coeffs).all():
        raise DataError("non-finite Haar coefficient")
    scores = normalize(coeffs, stats)
    mag = np.abs(scores)
    mag[:, ~stats.eligible] = -1.0
    thr = np.partition(mag, n - top_k, axis=1)[:, n - top_k]
    greater = mag > thr[:, None]
    need = top_k - greater.sum(axis=1)
    equal = mag == thr[:, None]
    take = equal & (np.cumsum(equal, axis=1) <= need[:, None])
    sel = greater | take
    rows, cols = np.nonzero(sel)
    cols = cols.reshape(coeffs.shape[0], top_k)
    negative = scores[np.arange(coeffs.shape[0])[:, None], cols] < 0
    return (2 * cols + negative).astype(np.uint32)


def jaccard(bits_a, bits_b) -> float:
    """Jaccard similarity of two sorted bit-index arrays (1.0 if both empty)."""
    a = np.asarray(bits_a)
    b = np.asarray(bits_b)
    if a.size == 0 and b.size == 0:
        return 1.0
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union


# ---------------------------------------------------------------------------
# fingerprint container and file format

@dataclass
class Fingerprint:
    index: int
    window_start_epoch_s: float
    bits: np.ndarray  # (top_k,) uint32, strictly ascending


@dataclass
class FingerprintSet:
    """Column-oriented batch of fingerprints from one channel.

    Every fingerprint has exactly top_k set bits, so `bits` is rectangular:
    row i holds the ascending bit indices of window `indices[i]`.
    """

    d: int
    top_k: int
    window_len_s: float
    window_lag_s: float
    indices: np.ndarray  # (n,) uint64
    epochs: np.ndarray   # (n,) float64
    bits: np.ndarray     # (n, top_k) uint32
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __getitem__(self, i: int) -> Fingerprint:
        return Fingerprint(int(self.indices[i]), float(self.epochs[i]),
                           self.bits[i])

    def validate(self) -> None:
        n = len(self)
        if self.bits.shape != (n, self.top_k) or self.epochs.shape != (n,):
            raise CorruptInputError("fingerprint arrays are inconsistent")
        if n == 0:
            return
        if int(self.bits.max()) >= self.d:
            raise CorruptInputError("fingerprint bit index out of range")
        halves = self.bits >> 1
        if self.top_k > 1 and not (np.diff(halves.astype(np.int64), axis=1) >= 1).all():
            raise CorruptInputError(
                "fingerprint bits must be ascending with one sign bit per coefficient"
            )


def write_fingerprint_file(path, fps: FingerprintSet,
                           extra: dict | None = None) -> None:
    fps.validate()
    header = {
        "d": fps.d,
        "top_k": fps.top_k,
        "window_len_s": fps.window_len_s,
        "window_lag_s": fps.window_lag_s,
    }
    header.update(fps.meta)
    if extra:
        header.update(extra)
    rec = np.zeros(len(fps), dtype=_fp_record_dtype(fps.top_k))
    rec["index"] = fps.indices
    rec["epoch"] = fps.epochs
    rec["bits"] = fps.bits
    with open(path, "wb") as f:
        _container.write_preamble(f, FP_MAGIC, header, count=len(fps))
        rec.tofile(f)


def _fp_record_dtype(top_k: int):
    return np.dtype([("index", "<u8"), ("epoch", "<f8"), ("bits", "<u4", (top_k,))])


def read_fingerprint_file(path) -> FingerprintSet:
    with open(path, "rb") as f:
        header, count, off = _container.read_preamble(f, FP_MAGIC, _FP_KIND)
        for key in ("d", "top_k", "window_len_s", "window_lag_s"):
            if key not in header:
                raise ConsistencyError(f"fingerprint header missing '{key}'")
        top_k = int(header["top_k"])
        dtype = _fp_record_dtype(top_k)
        size = os.fstat(f.fileno()).st_size
        _container.check_payload_size(size, off, count, dtype.itemsize, _FP_KIND)
        rec = np.fromfile(f, dtype=dtype, count=count)
    meta = {k: v for k, v in header.items()
            if k not in ("d", "top_k", "window_len_s", "window_lag_s")}
    fps = FingerprintSet(
        d=int(header["d"]),
        top_k=top_k,
        window_len_s=float(header["window_len_s"]),
        window_lag_s=float(header["window_lag_s"]),
        indices=rec["index"].astype(np.uint64),
        epochs=rec["epoch"].astype(np.float64),
        bits=np.ascontiguousarray(rec["bits"]),
        meta=meta,
    )
    fps.validate()
    return fps


def fingerprint_series(ts: TimeSeries, params: FingerprintParams,
                       stats: MadStats | None = None,
                       mad_rate: float = 0.1, mad_seed: int = 0,
                       batch: int = 512) -> tuple[FingerprintSet, MadStats]:
    """Fingerprint every window of a channel.

    When `stats` is None the per-coefficient median/MAD is first estimated
    from a `mad_rate` sample of this channel's windows.
    """
    params.validate()
    if stats is None:
        stats = estimate_mad(ts, params, rate=mad_rate, seed=mad_seed, batch=batch)
    if stats.n_coeffs != params.n_coeffs:
        raise ConsistencyError("MAD stats shape does not match params")
    total = n_windows(ts, params)
    if total == 0:
        raise DataError("series shorter than one fingerprint window")
    indices = np.empty(total, dtype=np.uint64)
    epochs = np.empty(total, dtype=np.float64)
    bits = np.empty((total, params.top_k), dtype=np.uint32)
    row = 0
    for idx, eps, coeffs in iter_coeff_batches(ts, params, batch=batch):
        b = idx.size
        indices[row: row + b] = idx
        epochs[row: row + b] = eps
        bits[row: row + b] = topk_bits(coeffs, stats, params.top_k)
        row += b
    fps = FingerprintSet(
        d=params.d,
        top_k=params.top_k,
        window_len_s=params.window_len_s,
        window_lag_s=params.window_lag_s,
        indices=indices,
        epochs=epochs,
        bits=bits,
        meta={
            "station": ts.station_id,
            "channel": ts.channel_id,
            "sample_rate_hz": ts.sample_rate_hz,
            "start_epoch_s": ts.start_epoch_s,
        },
    )
    return fps, stats


# ---------------------------------------------------------------------------
# spectrogram export

def write_spectrogram_csv(path, freqs, times, logpow) -> None:
    """CSV with header `freq_hz,t0,t1,...`; one row per frequency bin."""
    logpow = np.asarray(logpow)
    with open(path, "w", encoding="utf-8") as f:
        f.write("freq_hz," + ",".join(f"{t:.6f}" for t in times) + "\n")
        for fr, row in zip(freqs, logpow):
            f.write(f"{fr:.6f}," + ",".join(f"{v:.6g}" for v in row) + "\n")


_HEAT_STOPS = np.array([
    (0.267, 0.005, 0.329),
    (0.229, 0.322, 0.546),
    (0.127, 0.566, 0.551),
    (0.369, 0.789, 0.383),
    (0.993, 0.906, 0.144),
])


def _heat_rgb(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] values onto a perceptual-ish 5-stop ramp, vectorized."""
    x = np.clip(x, 0.0, 1.0) * (len(_HEAT_STOPS) - 1)
    i = np.minimum(x.astype(int), len(_HEAT_STOPS) - 2)
    frac = (x - i)[..., None]
    rgb = _HEAT_STOPS[i] * (1 - frac) + _HEAT_STOPS[i + 1] * frac
    return (rgb * 255).astype(int)


def write_spectrogram_svg(path, freqs, times, logpow,
                          max_cols: int = 512, max_rows: int = 128) -> None:
    """Standalone SVG heatmap of a log-power spectrogram.

    Large spectrograms are area-averaged down to at most max_rows x max_cols
    cells; horizontal runs of the same color merge into one rect. Low
    frequencies are drawn at the bottom.
    """
    logpow = np.asarray(logpow, dtype=np.float64)
    nf, nc = logpow.shape
    rows = min(nf, max_rows)
    cols = min(nc, max_cols)
    if (rows, cols) != (nf, nc):
        logpow = _resize_weights(nf, rows) @ logpow @ _resize_weights(nc, cols).T
    lo, hi = logpow.min(), logpow.max()
    span = hi - lo if hi > lo else 1.0
    rgb = _heat_rgb((logpow - lo) / span)
    cw, ch = 4, 4
    width, height = cols * cw + 80, rows * ch + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for r in range(rows):
        y = 10 + (rows - 1 - r) * ch
        c = 0
        while c < cols:
            run = c + 1
            while run < cols and (rgb[r, run] == rgb[r, c]).all():
                run += 1
            cr, cg, cb = rgb[r, c]
            parts.append(
                f'<rect x="{60 + c * cw}" y="{y}" width="{cw * (run - c)}" '
                f'height="{ch}" fill="rgb({cr},{cg},{cb})"/>'
            )
            c = run
    parts.append(
        f'<text x="8" y="{14}" font-size="10">{freqs[-1]:.1f} Hz</text>'
    )
    parts.append(
        f'<text x="8" y="{10 + rows * ch}" font-size="10">{freqs[0]:.1f} Hz</text>'
    )
    parts.append(
        f'<text x="60" y="{height - 8}" font-size="10">t={times[0]:.1f} s</text>'
    )
    parts.append(
        f'<text x="{width - 90}" y="{height - 8}" font-size="10">'
        f't={times[-1]:.1f} s</text>'
    )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts))
