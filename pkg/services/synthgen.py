"""Synthetic labelled cohorts with class-specific subcortical rhythms, and planted single dipoles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
import pandas as pd
from scipy import signal as sps

from services.errors import ValidationError
from services.forward import LeadField, ScalpRecording, project_sources
from services.neural import CLASS_NAMES
from services.scout import Atlas, region_source_indices

COMPONENTS_PER_BAND = 8

# (centre Hz, bandwidth Hz, relative power) per class
DEFAULT_PROFILES: dict[int, tuple[tuple[float, float, float], ...]] = {
    0: ((2.5, 3.0, 1.0), (5.0, 2.0, 0.4)),
    1: ((6.0, 4.0, 1.0), (10.0, 4.0, 0.2)),
    2: ((10.0, 4.0, 1.0), (5.0, 2.0, 0.2)),
}


@dataclass(frozen=True)
class CohortConfig:
    subjects_per_class: int = 9
    duration_s: float = 4.0
    sampling_rate: float = 1000.0
    noise_sigma: float = 0.5
    source_amplitude: float = 20.0
    background_level: float = 0.1
    profiles: dict[int, tuple[tuple[float, float, float], ...]] = field(
        default_factory=lambda: dict(DEFAULT_PROFILES)
    )
    seed: int = 0

    def __post_init__(self) -> None:
        if self.subjects_per_class < 1:
            raise ValidationError("subjects_per_class must be >= 1", stage="simulate")
        if not (self.duration_s > 0 and self.sampling_rate > 0):
            raise ValidationError("duration_s and sampling_rate must be positive", stage="simulate")
        if self.noise_sigma < 0 or self.background_level < 0 or self.source_amplitude < 0:
            raise ValidationError("noise_sigma, background_level and source_amplitude must be >= 0", stage="simulate")
        profiles = {int(k): tuple(tuple(float(x) for x in band) for band in v) for k, v in self.profiles.items()}
        object.__setattr__(self, "profiles", profiles)
        if sorted(profiles) != list(range(len(CLASS_NAMES))):
            raise ValidationError(f"profiles must cover classes 0..{len(CLASS_NAMES) - 1}", stage="simulate")
        nyq = self.sampling_rate / 2.0
        for label, bands in profiles.items():
            for centre, width, power in bands:
                if power < 0 or width < 0 or centre - width / 2 <= 0 or centre + width / 2 >= nyq:
                    raise ValidationError(
                        f"class {label} band ({centre}, {width}, {power}) is outside (0, {nyq:g}) Hz or negative",
                        stage="simulate",
                    )

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sampling_rate))

    @classmethod
    def from_config(cls, section: dict[str, Any], seed: int) -> "CohortConfig":
        profiles = section.get("profiles")
        return cls(
            subjects_per_class=int(section["subjects_per_class"]),
            duration_s=float(section["duration_s"]),
            sampling_rate=float(section["sampling_rate"]),
            noise_sigma=float(section["noise_sigma"]),
            source_amplitude=float(section["source_amplitude"]),
            background_level=float(section["background_level"]),
            profiles={int(k): v for k, v in profiles.items()} if profiles else dict(DEFAULT_PROFILES),
            seed=int(seed),
        )


def band_waveform(
    rng: np.random.Generator, t: np.ndarray, bands: Sequence[tuple[float, float, float]]
) -> np.ndarray:
    """Sum of evenly spaced random-phase sinusoids; each band carries its stated mean power."""
    out = np.zeros_like(t)
    for centre, width, power in bands:
        freqs = np.linspace(centre - width / 2, centre + width / 2, COMPONENTS_PER_BAND)
        phases = rng.uniform(0.0, 2.0 * math.pi, size=COMPONENTS_PER_BAND)
        amp = math.sqrt(2.0 * power / COMPONENTS_PER_BAND)
        out += amp * np.sin(2.0 * math.pi * freqs[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
    return out


def pink_noise(rng: np.random.Generator, n_rows: int, n_samples: int) -> np.ndarray:
    """Unit-variance rows with a 1/f power spectrum (FFT-shaped white noise)."""
    spectrum = np.fft.rfft(rng.normal(size=(n_rows, n_samples)), axis=1)
    f = np.arange(spectrum.shape[1], dtype=np.float64)
    f[0] = 1.0
    shaped = np.fft.irfft(spectrum / np.sqrt(f), n=n_samples, axis=1)
    shaped -= shaped.mean(axis=1, keepdims=True)
    std = shaped.std(axis=1, keepdims=True)
    return shaped / np.where(std > 0, std, 1.0)


def _check_atlas(lf: LeadField, atlas: Atlas) -> None:
    top = max(max(idx) for idx in atlas.regions)
    if top >= lf.n_sources or (atlas.n_sources is not None and atlas.n_sources != lf.n_sources):
        raise ValidationError(
            f"atlas (n_sources={atlas.n_sources}, max index {top}) does not match lead field with {lf.n_sources} sources",
            stage="simulate",
        )


def subject_sources(cfg: CohortConfig, lf: LeadField, atlas: Atlas, label: int, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_samples
    t = np.arange(n) / cfg.sampling_rate
    S = np.zeros((lf.n_sources, n))
    scout_idx = region_source_indices(atlas)
    background = np.setdiff1d(np.arange(lf.n_sources), scout_idx)
    for idx in atlas.regions:
        S[list(idx)] = cfg.source_amplitude * band_waveform(rng, t, cfg.profiles[label])
    if background.size and cfg.background_level > 0:
        S[background] = cfg.source_amplitude * cfg.background_level * pink_noise(rng, background.size, n)
    return S


def generate_cohort(cfg: CohortConfig, lf: LeadField, atlas: Atlas) -> list[ScalpRecording]:
    """``subjects_per_class`` recordings per class; subject ``k`` draws from seed ``cfg.seed + k``."""
    _check_atlas(lf, atlas)
    out: list[ScalpRecording] = []
    k = 0
    for label in range(len(CLASS_NAMES)):
        for _ in range(cfg.subjects_per_class):
            rng = np.random.default_rng(cfg.seed + k)
            S = subject_sources(cfg, lf, atlas, label, rng)
            out.append(
                project_sources(
                    lf,
                    S,
                    cfg.noise_sigma,
                    seed=int(rng.integers(0, 2**31 - 1)),
                    sampling_rate=cfg.sampling_rate,
                    label=label,
                    subject_id=f"S{k:03d}",
                )
            )
            k += 1
    return out


def cohort_frame(recordings: Sequence[ScalpRecording], cfg: CohortConfig, config_hash: str) -> pd.DataFrame:
    rows = [
        {
            "subject_id": rec.subject_id,
            "label": int(rec.label),
            "class_name": CLASS_NAMES[int(rec.label)],
            "seed": cfg.seed + k,
            "config_hash": config_hash,
        }
        for k, rec in enumerate(recordings)
    ]
    return pd.DataFrame(rows, columns=["subject_id", "label", "class_name", "seed", "config_hash"])


def plant_dipole(
    lf: LeadField,
    source_index: int,
    waveform: np.ndarray,
    noise_sigma: float = 0.0,
    *,
    seed: int = 0,
    sampling_rate: float = 512.0,
) -> tuple[ScalpRecording, int]:
    """Only ``source_index`` active with ``waveform``; returns the recording and the ground-truth index."""
    if not 0 <= int(source_index) < lf.n_sources:
        raise ValidationError(f"source index {source_index} outside 0..{lf.n_sources - 1}", stage="simulate")
    w = np.asarray(waveform, dtype=np.float64).ravel()
    S = np.zeros((lf.n_sources, w.size))
    S[int(source_index)] = w
    rec = project_sources(lf, S, noise_sigma, seed=seed, sampling_rate=sampling_rate)
    return rec, int(source_index)


def band_power(x: np.ndarray, fs: float, band: tuple[float, float]) -> float:
    """Welch power of ``x`` integrated over ``band`` (Hz)."""
    x = np.asarray(x, dtype=np.float64)
    nperseg = min(x.size, int(2 * fs))
    f, psd = sps.welch(x, fs=fs, nperseg=nperseg)
    mask = (f >= band[0]) & (f <= band[1])
    if not mask.any():
        return 0.0
    return float(np.sum(psd[mask]) * (f[1] - f[0]))
