"""Respiration waveforms: synthesis from annotations, filtering, spectra, rates, metrics.

All operations are pure functions on immutable value types and are safe to
call concurrently.  Frequencies are in Hz throughout; rates in breaths per
minute (bpm) with 1 Hz = 60 bpm.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_BAND_HZ = (0.3, 1.0)

# Absolute slack when testing whether an FFT bin frequency falls on a band
# edge; bin frequencies k*fs/n are not exactly representable in binary.
_EDGE_TOL_HZ = 1e-9


@dataclass(frozen=True)
class Waveform:
    """A uniformly sampled real-valued signal."""

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", samples)
        if samples.ndim != 1 or samples.size < 2:
            raise ValueError("waveform needs at least 2 samples")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform samples must be finite")
        if not (np.isfinite(self.sample_rate_hz) and self.sample_rate_hz > 0):
            raise ValueError("sample_rate_hz must be finite and positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def times(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate_hz


@dataclass(frozen=True)
class AnnotationTrack:
    """Sorted exhalation-start timestamps for one clip."""

    clip_id: str
    exhalation_times_s: np.ndarray
    clip_duration_s: float

    def __post_init__(self):
        times = np.asarray(self.exhalation_times_s, dtype=float)
        object.__setattr__(self, "exhalation_times_s", times)
        if times.ndim != 1:
            raise ValueError("exhalation_times_s must be one-dimensional")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError(f"timestamps of clip {self.clip_id!r} not strictly increasing")
        if times.size and (times[0] < 0 or times[-1] > self.clip_duration_s):
            raise ValueError(
                f"timestamp outside [0, {self.clip_duration_s}] s in clip {self.clip_id!r}"
            )


@dataclass(frozen=True)
class PowerSpectrum:
    """One-sided power spectrum over positive frequencies."""

    freqs_hz: np.ndarray
    power: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        freqs = np.asarray(self.freqs_hz, dtype=float)
        power = np.asarray(self.power, dtype=float)
        object.__setattr__(self, "freqs_hz", freqs)
        object.__setattr__(self, "power", power)
        if freqs.shape != power.shape:
            raise ValueError("freqs_hz and power must have equal length")
        if freqs.size and (np.any(np.diff(freqs) <= 0) or freqs[0] < 0):
            raise ValueError("frequencies must be strictly increasing and non-negative")
        if np.any(power < 0):
            raise ValueError("power must be non-negative")
        if self.normalized and abs(power.sum() - 1.0) > 1e-9:
            raise ValueError("normalized spectrum must sum to 1")


@dataclass(frozen=True)
class RateEstimate:
    bpm: float
    peak_freq_hz: float


@dataclass(frozen=True)
class MetricsReport:
    mae_bpm: float
    rmse_bpm: float
    pearson_r: float | None
    n: int


def band_mask(freqs_hz: np.ndarray, lo_hz: float, hi_hz: float) -> np.ndarray:
    """Boolean mask of bins inside [lo_hz, hi_hz], inclusive at both edges."""
    f = np.asarray(freqs_hz, dtype=float)
    return (f >= lo_hz - _EDGE_TOL_HZ) & (f <= hi_hz + _EDGE_TOL_HZ)


def annotations_to_waveform(
    track: AnnotationTrack, frame_rate_hz: float, radius_frames: float = 4.0
) -> Waveform:
    """Convert exhalation-start annotations into a smooth reference waveform.

    Places a unit impulse at the frame nearest each timestamp (round half up)
    and convolves with a unit-peak Gaussian of standard deviation
    ``radius_frames`` samples, truncated at +/-4 sigma.  ``radius_frames = 0``
    yields the raw impulse train.
    """
    if frame_rate_hz <= 0:
        raise ValueError("frame_rate_hz must be positive")
    if track.exhalation_times_s.size == 0:
        raise ValueError(f"no annotations for clip {track.clip_id!r}")
    n = math.ceil(track.clip_duration_s * frame_rate_hz)
    if n < 2:
        raise ValueError("clip too short for a waveform")

    impulses = np.zeros(n)
    idx = np.floor(track.exhalation_times_s * frame_rate_hz + 0.5).astype(int)
    impulses[np.clip(idx, 0, n - 1)] = 1.0

    if radius_frames == 0:
        return Waveform(impulses, frame_rate_hz)
    half = math.ceil(4.0 * radius_frames)
    taps = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (taps / radius_frames) ** 2)  # peak 1 at the centre
    smooth = np.convolve(impulses, kernel, mode="same")
    return Waveform(smooth, frame_rate_hz)


def resample(w: Waveform, target_hz: float) -> Waveform:
    """Linearly interpolate onto a uniform grid at ``target_hz``."""
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    span_s = (len(w) - 1) / w.sample_rate_hz
    m = int(math.floor(span_s * target_hz + 1e-9)) + 1
    if m < 2:
        raise ValueError("target grid has fewer than 2 samples")
    t_new = np.arange(m) / target_hz
    samples = np.interp(t_new, w.times(), w.samples)
    return Waveform(samples, target_hz)


def zscore(w: Waveform) -> Waveform:
    """Standardize to zero mean and unit population standard deviation."""
    std = float(w.samples.std())
    if std < 1e-12:
        raise ValueError("zero variance")
    return Waveform((w.samples - w.samples.mean()) / std, w.sample_rate_hz)


def bandpass_filter(w: Waveform, lo_hz: float = 0.3, hi_hz: float = 1.0) -> Waveform:
    """Ideal frequency-domain bandpass: zero every DFT bin outside [lo, hi].

    The DC bin is always removed, so the output has zero mean.  Zero phase
    and exactly invertible on bin-aligned content.
    """
    nyquist = w.sample_rate_hz / 2.0
    if not (0 <= lo_hz < hi_hz):
        raise ValueError("need 0 <= lo_hz < hi_hz")
    if hi_hz > nyquist + _EDGE_TOL_HZ:
        raise ValueError(f"hi_hz {hi_hz} exceeds Nyquist {nyquist}")
    n = len(w)
    spectrum = np.fft.rfft(w.samples)
    freqs = np.fft.rfftfreq(n, d=1.0 / w.sample_rate_hz)
    keep = band_mask(freqs, lo_hz, hi_hz)
    keep[0] = False
    spectrum[~keep] = 0.0
    return Waveform(np.fft.irfft(spectrum, n=n), w.sample_rate_hz)


def _one_sided_psd(samples: np.ndarray, sample_rate_hz: float, nfft: int | None = None):
    """|DFT|^2 of the mean-removed signal over positive frequencies."""
    z = samples - samples.mean()
    n = nfft or z.size
    power = np.abs(np.fft.rfft(z, n=n)) ** 2
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate_hz)
    return freqs[1:], power[1:]


def power_spectrum(
    w: Waveform,
    band: tuple[float, float] | None = None,
    normalize: bool = False,
) -> PowerSpectrum:
    """One-sided power spectral density of a waveform.

    Parameters
    ----------
    band : optional (lo_hz, hi_hz)
        Keep only bins inside the band (inclusive edges).
    normalize : bool
        Scale the retained power to unit cumulative sum.
    """
    if len(w) < 4:
        raise ValueError("need at least 4 samples")
    freqs, power = _one_sided_psd(w.samples, w.sample_rate_hz)
    if band is not None:
        keep = band_mask(freqs, band[0], band[1])
        if not keep.any():
            raise ValueError("empty band")
        freqs, power = freqs[keep], power[keep]
    if normalize:
        total = power.sum()
        if total <= 0:
            raise ValueError("zero power; cannot normalize")
        power = power / total
    return PowerSpectrum(freqs, power, normalized=normalize)


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def estimate_rate(
    w: Waveform,
    lo_hz: float = 0.3,
    hi_hz: float = 1.0,
    pad_factor: int = 4,
) -> RateEstimate:
    """Dominant rate as the frequency of maximal in-band spectral power.

    Zero-pads to ``pad_factor`` times the next power of two for sub-bin peak
    localization.  Ties break toward the lower frequency.
    """
    if w.duration_s < 10.0 - 1e-9:
        raise ValueError("need at least 10 s of signal")
    if pad_factor < 1:
        raise ValueError("pad_factor must be >= 1")
    nfft = pad_factor * _next_pow2(len(w))
    freqs, power = _one_sided_psd(w.samples, w.sample_rate_hz, nfft=nfft)
    keep = band_mask(freqs, lo_hz, hi_hz)
    if not keep.any():
        raise ValueError("empty band")
    freqs, power = freqs[keep], power[keep]
    peak = float(freqs[int(np.argmax(power))])  # argmax returns the first (lowest) max
    return RateEstimate(bpm=60.0 * peak, peak_freq_hz=peak)


def compute_metrics(pred_bpm, ref_bpm) -> MetricsReport:
    """MAE, RMSE and Pearson correlation between predicted and reference rates.

    Pearson correlation is reported as ``None`` when fewer than two pairs are
    given or either sequence has zero variance.
    """
    pred = np.asarray(pred_bpm, dtype=float)
    ref = np.asarray(ref_bpm, dtype=float)
    if pred.shape != ref.shape or pred.ndim != 1:
        raise ValueError("pred and ref must be 1-D sequences of equal length")
    if pred.size < 1:
        raise ValueError("need at least one pair")
    err = pred - ref
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err**2).mean()))
    pearson = None
    if pred.size >= 2:
        p0 = pred - pred.mean()
        r0 = ref - ref.mean()
        denom = np.sqrt((p0**2).sum() * (r0**2).sum())
        if denom > 0:
            pearson = float(np.clip((p0 * r0).sum() / denom, -1.0, 1.0))
    return MetricsReport(mae_bpm=mae, rmse_bpm=rmse, pearson_r=pearson, n=int(pred.size))


# ---------------------------------------------------------------------------
# Annotation file format: CSV with header "clip_id,exhalation_time_s", one
# record per line, UTF-8.  A file may hold several clips.


def write_annotation_file(path, tracks: list[AnnotationTrack]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "exhalation_time_s"])
        for track in tracks:
            for t in track.exhalation_times_s:
                writer.writerow([track.clip_id, repr(float(t))])


def read_annotation_times(path) -> dict[str, list[float]]:
    """Parse an annotation file into ``{clip_id: [time_s, ...]}``.

    Raises ``ValueError`` naming the offending line on malformed input.
    Ordering within a clip is preserved as written.
    """
    by_clip: dict[str, list[float]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["clip_id", "exhalation_time_s"]:
            raise ValueError(f"{path}: missing or malformed header line")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'clip_id,exhalation_time_s'")
            clip_id = row[0].strip()
            try:
                t = float(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad timestamp {row[1]!r}") from None
            by_clip.setdefault(clip_id, []).append(t)
    return by_clip


def track_from_times(
    clip_id: str, times: list[float], clip_duration_s: float | None = None
) -> AnnotationTrack:
    """Build a validated track; infer a duration when none is known.

    The inferred duration extends one mean inter-annotation gap past the last
    timestamp so the final cycle has room (1 s when only one timestamp).
    """
    if not times:
        raise ValueError(f"no annotations for clip {clip_id!r}")
    arr = np.asarray(times, dtype=float)
    if clip_duration_s is None:
        tail = float(np.diff(arr).mean()) if arr.size >= 2 else 1.0
        clip_duration_s = float(arr[-1]) + tail
    return AnnotationTrack(clip_id, arr, clip_duration_s)
