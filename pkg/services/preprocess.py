"""Scalp preprocessing (band-pass, re-reference, downsample) and epoch segmentation."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from services.errors import ValidationError
from services.forward import ScalpRecording
from services.scout import ScoutMatrix

EPOCH_SAMPLES = 128
EPOCH_RATE = 512.0
ANTIALIAS_FRACTION = 0.45
ANTIALIAS_ORDER = 8

PRESETS = {
    # average reference first, then the order-8 band-pass
    "order8": {"order": 8, "reference_first": True},
    # order-4 band-pass first, then average reference
    "order4": {"order": 4, "reference_first": False},
}


@dataclass
class Epoch:
    samples: np.ndarray
    subject_id: str
    label: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (EPOCH_SAMPLES, 6):
            raise ValidationError(f"epoch must be {EPOCH_SAMPLES} x 6, got {self.samples.shape}", stage="epoch")
        if not np.all(np.isfinite(self.samples)):
            raise ValidationError("epoch contains non-finite samples", stage="epoch")


def _zero_phase(sos: np.ndarray, data: np.ndarray, order: int) -> np.ndarray:
    padlen = min(3 * order, data.shape[-1] - 1)
    return sps.sosfiltfilt(sos, data, axis=-1, padtype="odd", padlen=max(padlen, 0))


def butterworth_bandpass(
    rec: ScalpRecording, low: float, high: float, order: int = 8, zero_phase: bool = True
) -> ScalpRecording:
    """IIR band-pass of total ``order``; zero-phase runs it forward and backward."""
    nyq = rec.sampling_rate / 2.0
    if not (0 < low < high < nyq):
        raise ValidationError(
            f"band edges must satisfy 0 < low < high < {nyq:g} Hz, got ({low!r}, {high!r})",
            stage="preprocess",
        )
    if order not in (4, 8):
        raise ValidationError(f"filter order must be 4 or 8, got {order!r}", stage="preprocess")
    # a band-pass design doubles the prototype order
    sos = sps.butter(order // 2, [low, high], btype="bandpass", fs=rec.sampling_rate, output="sos")
    if zero_phase:
        out = _zero_phase(sos, rec.data, order)
    else:
        out = sps.sosfilt(sos, rec.data, axis=-1)
    return rec.with_data(out)


def average_rereference(rec: ScalpRecording) -> ScalpRecording:
    if rec.data.shape[0] < 2:
        raise ValidationError("average reference needs at least 2 channels", stage="preprocess")
    return rec.with_data(rec.data - rec.data.mean(axis=0, keepdims=True))


def downsample(rec: ScalpRecording, target: float) -> ScalpRecording:
    rate = float(rec.sampling_rate)
    target = float(target)
    if not target > 0:
        raise ValidationError(f"target rate must be positive, got {target!r}", stage="preprocess")
    if target > rate:
        raise ValidationError(f"cannot upsample {rate:g} Hz to {target:g} Hz", stage="preprocess")
    if target == rate:
        return rec.with_data(rec.data.copy())

    sos = sps.butter(ANTIALIAS_ORDER, ANTIALIAS_FRACTION * target, btype="lowpass", fs=rate, output="sos")
    smoothed = _zero_phase(sos, rec.data, ANTIALIAS_ORDER)
    ratio = Fraction(target / rate).limit_denominator(10_000)
    out = sps.resample_poly(smoothed, ratio.numerator, ratio.denominator, axis=-1, padtype="line")
    n_out = int(np.floor(rec.n_samples * target / rate))
    return rec.with_data(out[:, :n_out], sampling_rate=target)


def preprocess_recording(
    rec: ScalpRecording,
    *,
    preset: str = "order8",
    low: float = 0.5,
    high: float = 40.0,
    target_rate: float = EPOCH_RATE,
) -> ScalpRecording:
    if preset not in PRESETS:
        raise ValidationError(f"unknown preprocessing preset {preset!r}", stage="preprocess")
    cfg = PRESETS[preset]
    if cfg["reference_first"]:
        out = butterworth_bandpass(average_rereference(rec), low, high, order=cfg["order"])
    else:
        out = average_rereference(butterworth_bandpass(rec, low, high, order=cfg["order"]))
    return downsample(out, target_rate)


def segment_epochs(
    sm: ScoutMatrix,
    epoch_len: int = EPOCH_SAMPLES,
    *,
    subject_id: str = "",
    label: int = -1,
) -> list[Epoch]:
    """Contiguous non-overlapping windows; the trailing remainder is dropped."""
    if epoch_len != EPOCH_SAMPLES:
        raise ValidationError(f"epochs are {EPOCH_SAMPLES} samples long, got epoch_len={epoch_len}", stage="epoch")
    if sm.sampling_rate != EPOCH_RATE:
        raise ValidationError(
            f"{EPOCH_SAMPLES}-sample epochs require {EPOCH_RATE:g} Hz scouts, got {sm.sampling_rate:g} Hz",
            stage="epoch",
        )
    n = sm.series.shape[1] // epoch_len
    return [
        Epoch(samples=sm.series[:, k * epoch_len:(k + 1) * epoch_len].T, subject_id=subject_id, label=label)
        for k in range(n)
    ]
