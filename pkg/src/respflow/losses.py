"""Training losses over waveforms, each with its analytic gradient.

The main loss compares band-limited, unit-normalized power spectra, so it is
invariant to amplitude scaling, constant offsets and circular time shifts of
either argument.  The L1, L2 and negative-Pearson baselines operate directly
in the time domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .signals import Waveform, band_mask

LOSS_KINDS = ("l1", "l2", "neg_pearson")


@dataclass(frozen=True)
class LossResult:
    value: float
    grad_wrt_pred: np.ndarray

    def __post_init__(self):
        grad = np.asarray(self.grad_wrt_pred, dtype=float)
        object.__setattr__(self, "grad_wrt_pred", grad)
        if not (np.isfinite(self.value) and np.all(np.isfinite(grad))):
            raise ValueError("loss value and gradient must be finite")


def _band_bins(n: int, sample_rate_hz: float, lo_hz: float, hi_hz: float) -> np.ndarray:
    """Indices into the one-sided DFT inside [lo, hi]; DC is always excluded."""
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate_hz)
    keep = band_mask(freqs, lo_hz, hi_hz)
    keep[0] = False
    return np.nonzero(keep)[0]


def _normalized_band_psd(samples: np.ndarray, bins: np.ndarray):
    """Unit-sum in-band PSD together with the quantities its gradient needs."""
    z = samples - samples.mean()
    spectrum = np.fft.rfft(z)
    band_power = np.abs(spectrum[bins]) ** 2
    total = band_power.sum()
    if total <= 0:
        raise ValueError("degenerate spectrum: zero in-band power")
    return band_power / total, total, spectrum


def spectral_bandpass_loss(
    pred: Waveform, ref: Waveform, lo_hz: float = 0.3, hi_hz: float = 1.0
) -> LossResult:
    """L2 distance between the normalized in-band power spectra of two waveforms.

    The gradient with respect to the predicted samples is exact, chaining
    through normalization, the band mask, the squared DFT magnitudes and mean
    removal in closed form.  At identical spectra the loss is zero and the
    (sub)gradient is defined as zero.
    """
    n = len(pred)
    if n != len(ref):
        raise ValueError("pred and ref must have equal length")
    if abs(pred.sample_rate_hz - ref.sample_rate_hz) > 1e-9:
        raise ValueError("pred and ref must share a sample rate")
    bins = _band_bins(n, pred.sample_rate_hz, lo_hz, hi_hz)
    if bins.size == 0:
        raise ValueError("empty band")

    p, total_p, spectrum = _normalized_band_psd(pred.samples, bins)
    q, _, _ = _normalized_band_psd(ref.samples, bins)

    diff = p - q
    value = float(np.sqrt((diff**2).sum()))
    if value < 1e-15:
        return LossResult(value=value, grad_wrt_pred=np.zeros(n))

    # dL/dp_k, then through the unit-sum normalization p = P / total.
    g_p = diff / value
    w = (g_p - float(g_p @ p)) / total_p
    # Adjoint of k-th bin power |Z_k|^2 back to the time domain:
    # dL/dz_m = 2 * sum_k w_k Re(Z_k e^{i 2 pi k m / n}).  An irfft realizes
    # the sum; interior bins pick up its built-in factor 2, edge bins do not.
    cotangent = np.zeros(n // 2 + 1, dtype=complex)
    cotangent[bins] = w * spectrum[bins]
    if n % 2 == 0 and bins.size and bins[-1] == n // 2:
        cotangent[n // 2] *= 2.0
    grad_z = n * np.fft.irfft(cotangent, n=n)
    grad = grad_z - grad_z.mean()  # adjoint of mean removal
    return LossResult(value=value, grad_wrt_pred=grad)


def baseline_loss(kind: str, pred: Waveform, ref: Waveform) -> LossResult:
    """L1, L2 or negative-Pearson loss with analytic gradients.

    ``kind`` is one of ``"l1"``, ``"l2"``, ``"neg_pearson"``.  The L1
    subgradient at exact equality is 0.
    """
    kind = kind.lower()
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    if len(pred) != len(ref):
        raise ValueError("pred and ref must have equal length")
    p = pred.samples
    r = ref.samples
    n = p.size

    if kind == "l1":
        d = p - r
        return LossResult(float(np.abs(d).mean()), np.sign(d) / n)
    if kind == "l2":
        d = p - r
        return LossResult(float((d**2).mean()), 2.0 * d / n)

    p0 = p - p.mean()
    r0 = r - r.mean()
    sp = np.sqrt((p0**2).sum())
    sr = np.sqrt((r0**2).sum())
    if sp < 1e-12 or sr < 1e-12:
        raise ValueError("zero variance")
    rho = float((p0 @ r0) / (sp * sr))
    grad = -(r0 / sr - rho * p0 / sp) / sp
    return LossResult(-rho, grad)


def finite_diff_gradcheck(
    loss: Callable[[Waveform, Waveform], LossResult],
    pred: Waveform,
    ref: Waveform,
    h: float = 1e-5,
) -> float:
    """Max relative error of the analytic gradient against central differences.

    The relative error per coordinate is |ga - gn| / max(|ga| + |gn|, 1e-8),
    evaluated in double precision.
    """
    base = np.asarray(pred.samples, dtype=float)
    analytic = loss(pred, ref).grad_wrt_pred
    numeric = np.empty_like(analytic)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        hi = loss(Waveform(bumped, pred.sample_rate_hz), ref).value
        bumped[i] = base[i] - h
        lo = loss(Waveform(bumped, pred.sample_rate_hz), ref).value
        numeric[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
