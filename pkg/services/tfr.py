"""Morlet continuous wavelet transform of 128-sample epochs into left/right scalogram images.

Coefficients are the direct inner product ``W[s, tau] = dt * sum_k x[k] conj(psi_{s,tau}(t_k))``
with zero padding outside the window. Images are laid out scale rows x time columns x channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from services.errors import ShapeError, ValidationError
from services.preprocess import EPOCH_RATE, EPOCH_SAMPLES, Epoch

N_SCALES = 128
MIN_OMEGA0 = 5.0
CHUNK_EPOCHS = 32
_MOTHER_NORM = math.pi ** -0.25


@dataclass(frozen=True)
class WaveletParams:
    omega0: float
    scales: tuple[float, ...]
    sampling_rate: float = EPOCH_RATE

    def __post_init__(self) -> None:
        scales = tuple(float(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if self.omega0 < MIN_OMEGA0:
            raise ValidationError(f"omega0 must be >= {MIN_OMEGA0}, got {self.omega0!r}", stage="cwt")
        if len(scales) != N_SCALES:
            raise ValidationError(f"expected {N_SCALES} scales, got {len(scales)}", stage="cwt")
        if scales[0] <= 0 or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValidationError("scales must be positive and strictly increasing", stage="cwt")
        if not self.sampling_rate > 0:
            raise ValidationError("sampling_rate must be positive", stage="cwt")


@dataclass
class ScalogramPair:
    left: np.ndarray
    right: np.ndarray
    label: int
    subject_id: str


def default_wavelet_params(
    sampling_rate: float = EPOCH_RATE,
    omega0: float = 6.0,
    f_min: float = 0.5,
    f_max: float = 40.0,
    n_scales: int = N_SCALES,
) -> WaveletParams:
    """Log-spaced scales whose pseudo-frequencies run from ``f_max`` (row 0) down to ``f_min``."""
    if not 0 < f_min < f_max:
        raise ValidationError(f"need 0 < f_min < f_max, got ({f_min}, {f_max})", stage="cwt")
    freqs = np.geomspace(f_max, f_min, n_scales)
    scales = omega0 / (2.0 * math.pi * freqs)
    return WaveletParams(omega0=float(omega0), scales=tuple(scales.tolist()), sampling_rate=float(sampling_rate))


def pseudo_frequencies(params: WaveletParams) -> np.ndarray:
    return params.omega0 / (2.0 * math.pi * np.asarray(params.scales))


def morlet_basis(params: WaveletParams, sigma: float, tau: float, t: np.ndarray) -> np.ndarray:
    if not sigma > 0:
        raise ValidationError(f"scale must be positive, got {sigma!r}", stage="cwt")
    u = (np.asarray(t, dtype=np.float64) - tau) / sigma
    return _MOTHER_NORM * np.exp(1j * params.omega0 * u) * np.exp(-0.5 * u * u) / math.sqrt(sigma)


@lru_cache(maxsize=4)
def _conj_basis(params: WaveletParams, n: int) -> np.ndarray:
    """conj(psi_{s_i, tau_j}(t_k)) as an (S, n, n) tensor; depends only on the lag k - j."""
    dt = 1.0 / params.sampling_rate
    lags = np.arange(-(n - 1), n) * dt
    table = np.stack([morlet_basis(params, s, 0.0, lags) for s in params.scales], axis=0)
    k = np.arange(n)
    lag_index = (k[None, :] - k[:, None]) + (n - 1)
    out = np.conj(table[:, lag_index])
    out.setflags(write=False)
    return out


def _check_length(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != EPOCH_SAMPLES:
        raise ShapeError(f"CWT input must have {EPOCH_SAMPLES} samples, got {arr.shape[-1]}", stage="cwt")
    return arr


def cwt_complex(x: np.ndarray, params: WaveletParams) -> np.ndarray:
    """Complex coefficients; ``x`` is (..., 128) and the result (..., scales, 128)."""
    arr = _check_length(x)
    basis = _conj_basis(params, EPOCH_SAMPLES)
    n_scales, n, _ = basis.shape
    dt = 1.0 / params.sampling_rate
    # (S, n, n) -> (n, S*n) so the sum over k is one matmul
    flat = arr.reshape(-1, n) @ basis.reshape(n_scales * n, n).T
    return dt * flat.reshape(arr.shape[:-1] + (n_scales, n))


def cwt_scalogram(x: np.ndarray, params: WaveletParams) -> np.ndarray:
    arr = _check_length(x)
    if arr.ndim != 1:
        raise ShapeError(f"expected a single 128-sample sequence, got shape {arr.shape}", stage="cwt")
    return np.abs(cwt_complex(arr, params))


def dominant_scale_index(x: np.ndarray, params: WaveletParams) -> int:
    """Scale row with the largest energy sum_tau |W[s, tau]|^2."""
    W = cwt_complex(_check_length(x), params)
    energy = np.sum(np.abs(W) ** 2, axis=-1)
    return int(np.argmax(energy))


def normalize_maps(maps: np.ndarray) -> np.ndarray:
    """Min-max each (rows, cols) map in a (..., rows, cols) stack to [0, 1]; constant maps become zeros."""
    lo = maps.min(axis=(-2, -1), keepdims=True)
    hi = maps.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (maps - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def _channel_maps(samples: np.ndarray, params: WaveletParams) -> np.ndarray:
    """(..., 128, 6) time x channel -> (..., 128, 128, 6) normalized scale x time x channel.

    A channel that is constant over the epoch gives an all-zero map; its CWT is not
    constant because of the zero padding at the window edges.
    """
    channels_first = np.swapaxes(samples, -1, -2)
    mags = normalize_maps(np.abs(cwt_complex(channels_first, params)))
    flat = np.ptp(samples, axis=-2) == 0
    mags = np.where(flat[..., None, None], 0.0, mags)
    return np.moveaxis(mags, -3, -1)


def epoch_to_images(e: Epoch, params: WaveletParams) -> ScalogramPair:
    image = _channel_maps(e.samples, params)
    return ScalogramPair(left=image[..., :3], right=image[..., 3:], label=e.label, subject_id=e.subject_id)


def _chunks(n: int, size: int) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def epochs_to_image_batches(
    samples: np.ndarray, params: WaveletParams, *, chunk: int = CHUNK_EPOCHS
) -> tuple[np.ndarray, np.ndarray]:
    """E x 128 x 6 epochs -> (left, right) batches of E x 128 x 128 x 3 images."""
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (EPOCH_SAMPLES, 6):
        raise ShapeError(f"epoch batch must be E x {EPOCH_SAMPLES} x 6, got {arr.shape}", stage="cwt")
    n = arr.shape[0]
    left = np.empty((n, N_SCALES, EPOCH_SAMPLES, 3), dtype=np.float64)
    right = np.empty_like(left)
    for sl in _chunks(n, chunk):
        image = _channel_maps(arr[sl], params)
        left[sl] = image[..., :3]
        right[sl] = image[..., 3:]
    return left, right
