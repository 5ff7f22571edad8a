"""Forward model: lead field of a homogeneous conducting sphere and V = A S + Z.

Units: dipole moments in nA*m, potentials in microvolts, lengths in metres.
Laterality: positive x is the right hemisphere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numpy.polynomial import legendre as npleg

from services.errors import FormatError, GeometryError, ShapeError, ValidationError
from services.tensor_container import read_json, read_tensor, sidecar_path, write_json, write_tensor

DEFAULT_RADIUS = 0.09
DEFAULT_CONDUCTIVITY = 0.33
DEFAULT_SERIES_ORDER = 60
MIN_SERIES_ORDER = 40
# volts per A*m -> microvolts per nA*m
GAIN_SCALE = 1e-3


@dataclass
class HeadGeometry:
    sphere_radius: float
    conductivity: float
    electrode_positions: np.ndarray
    source_positions: np.ndarray
    source_orientations: np.ndarray
    electrode_labels: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.electrode_positions = np.asarray(self.electrode_positions, dtype=np.float64).reshape(-1, 3)
        self.source_positions = np.asarray(self.source_positions, dtype=np.float64).reshape(-1, 3)
        self.source_orientations = np.asarray(self.source_orientations, dtype=np.float64).reshape(-1, 3)
        if not self.electrode_labels:
            self.electrode_labels = [f"E{i + 1:03d}" for i in range(len(self.electrode_positions))]

    @property
    def n_electrodes(self) -> int:
        return int(self.electrode_positions.shape[0])

    @property
    def n_sources(self) -> int:
        return int(self.source_positions.shape[0])

    def validate(self) -> None:
        R = float(self.sphere_radius)
        if not (R > 0 and math.isfinite(R)):
            raise GeometryError(f"sphere_radius must be positive, got {self.sphere_radius!r}")
        if not (self.conductivity > 0 and math.isfinite(self.conductivity)):
            raise GeometryError(f"conductivity must be positive, got {self.conductivity!r}")
        if self.n_electrodes < 2:
            raise GeometryError("at least 2 electrodes are required")
        if self.n_sources < 1:
            raise GeometryError("at least 1 source is required")
        if self.source_orientations.shape != self.source_positions.shape:
            raise ValidationError("source_orientations must have one row per source")
        if len(self.electrode_labels) != self.n_electrodes:
            raise ValidationError("electrode_labels length does not match electrode count")

        radii = np.linalg.norm(self.source_positions, axis=1)
        outside = np.flatnonzero(radii >= R)
        if outside.size:
            raise GeometryError(
                f"source {int(outside[0])} lies on or outside the sphere (|r|={radii[outside[0]]:.6g} m, R={R})",
                details={"sources": outside.tolist()},
            )
        norms = np.linalg.norm(self.source_orientations, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-12)
        if bad.size:
            raise ValidationError(
                f"orientation of source {int(bad[0])} is not unit-norm (|o|={norms[bad[0]]!r})",
                details={"sources": bad.tolist()},
            )
        e_r = np.linalg.norm(self.electrode_positions, axis=1)
        off = np.flatnonzero(np.abs(e_r - R) > 1e-9 * R)
        if off.size:
            raise GeometryError(f"electrode {int(off[0])} is not on the sphere surface (|r|={e_r[off[0]]!r})")


@dataclass
class LeadField:
    gain: np.ndarray
    geometry: HeadGeometry | None = None
    provenance: str = "spherical"

    def __post_init__(self) -> None:
        self.gain = np.asarray(self.gain, dtype=np.float64)
        if self.gain.ndim != 2:
            raise ShapeError(f"lead field must be a matrix, got shape {self.gain.shape}")
        if self.gain.shape[0] < 2 or self.gain.shape[1] < 1:
            raise ShapeError(f"lead field needs >= 2 channels and >= 1 source, got {self.gain.shape}")
        if not np.all(np.isfinite(self.gain)):
            raise ValidationError("lead field contains non-finite entries")

    @property
    def n_channels(self) -> int:
        return int(self.gain.shape[0])

    @property
    def n_sources(self) -> int:
        return int(self.gain.shape[1])


@dataclass
class ScalpRecording:
    data: np.ndarray
    sampling_rate: float
    channel_labels: list[str]
    label: int | None = None
    subject_id: str | None = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"recording data must be channels x samples, got shape {self.data.shape}")
        if not self.sampling_rate > 0:
            raise ValidationError(f"sampling_rate must be positive, got {self.sampling_rate!r}")
        if len(self.channel_labels) != self.data.shape[0]:
            raise ShapeError(
                f"{self.data.shape[0]} rows but {len(self.channel_labels)} channel labels"
            )

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[1])

    def with_data(self, data: np.ndarray, sampling_rate: float | None = None) -> "ScalpRecording":
        return ScalpRecording(
            data=data,
            sampling_rate=self.sampling_rate if sampling_rate is None else sampling_rate,
            channel_labels=list(self.channel_labels),
            label=self.label,
            subject_id=self.subject_id,
        )


def _source_column(geometry: HeadGeometry, index: int, order: int, e_hat: np.ndarray) -> np.ndarray:
    R = float(geometry.sphere_radius)
    r0 = geometry.source_positions[index]
    p = geometry.source_orientations[index]
    dist = float(np.linalg.norm(r0))
    f = dist / R
    # at the centre only the n=1 term survives and it does not depend on r0_hat
    r0_hat = r0 / dist if dist > 0 else np.array([0.0, 0.0, 1.0])

    cos_g = np.clip(e_hat @ r0_hat, -1.0, 1.0)
    p_rad = float(p @ r0_hat)
    p_el = e_hat @ p

    n = np.arange(1, order + 1, dtype=np.float64)
    fn = f ** (n - 1)
    a = np.concatenate(([0.0], (2 * n + 1) * fn))
    b = np.concatenate(([0.0], (2 * n + 1) / n * fn))
    series_a = npleg.legval(cos_g, a)
    series_b = npleg.legval(cos_g, npleg.legder(b))

    scale = GAIN_SCALE / (4.0 * math.pi * geometry.conductivity * R * R)
    return scale * (p_rad * series_a + (p_el - cos_g * p_rad) * series_b)


def build_spherical_lead_field(geometry: HeadGeometry, order: int = DEFAULT_SERIES_ORDER) -> LeadField:
    """Gain of fixed-orientation dipoles in a homogeneous sphere (Legendre series, truncated at ``order``)."""
    if int(order) < MIN_SERIES_ORDER:
        raise ValidationError(f"series truncation order must be >= {MIN_SERIES_ORDER}, got {order}")
    geometry.validate()
    e_hat = geometry.electrode_positions / np.linalg.norm(geometry.electrode_positions, axis=1, keepdims=True)
    gain = np.empty((geometry.n_electrodes, geometry.n_sources), dtype=np.float64)
    for j in range(geometry.n_sources):
        gain[:, j] = _source_column(geometry, j, int(order), e_hat)
    return LeadField(gain=gain, geometry=geometry, provenance="spherical")


def reference_lead_field(lf: LeadField) -> LeadField:
    """Average-reference the gain (H A) to match average-referenced recordings."""
    gain = lf.gain - lf.gain.mean(axis=0, keepdims=True)
    return LeadField(gain=gain, geometry=lf.geometry, provenance=lf.provenance)


def save_lead_field(path: str | Path, lf: LeadField) -> Path:
    return write_tensor(path, lf.gain, dtype="f64")


def load_lead_field(path: str | Path) -> LeadField:
    gain = read_tensor(path)
    if gain.ndim != 2:
        raise FormatError(f"lead field file declares {gain.ndim} dims, expected a matrix", stage="forward")
    if gain.shape[0] < 2 or gain.shape[1] < 1:
        raise FormatError(f"lead field file has unusable dims {gain.shape}", stage="forward")
    return LeadField(gain=gain, geometry=None, provenance="external")


def project_sources(
    lf: LeadField,
    sources: np.ndarray,
    noise_sigma: float,
    *,
    seed: int = 0,
    sampling_rate: float = 512.0,
    channel_labels: Sequence[str] | None = None,
    label: int | None = None,
    subject_id: str | None = None,
) -> ScalpRecording:
    S = np.asarray(sources, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != lf.n_sources:
        raise ShapeError(f"source matrix shape {S.shape} does not match lead field with {lf.n_sources} sources")
    if not noise_sigma >= 0:
        raise ValidationError(f"noise_sigma must be >= 0, got {noise_sigma!r}")
    data = lf.gain @ S
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data = data + rng.normal(0.0, float(noise_sigma), size=data.shape)
    if channel_labels is None:
        if lf.geometry is not None:
            channel_labels = lf.geometry.electrode_labels
        else:
            channel_labels = [f"E{i + 1:03d}" for i in range(lf.n_channels)]
    return ScalpRecording(
        data=data,
        sampling_rate=float(sampling_rate),
        channel_labels=list(channel_labels),
        label=label,
        subject_id=subject_id,
    )


def fibonacci_cap(n: int, radius: float, z_min: float = -0.3) -> np.ndarray:
    """``n`` near-uniform points on the sphere cap z/R >= z_min."""
    k = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - (1.0 - z_min) * k / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = k * math.pi * (3.0 - math.sqrt(5.0))
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return radius * pts


def _unit_rows(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v


def _points_in_ball(rng: np.random.Generator, center: np.ndarray, radius: float, n: int) -> np.ndarray:
    d = _unit_rows(rng, n)
    r = radius * rng.uniform(0.0, 1.0, size=n) ** (1.0 / 3.0)
    return center + d * r[:, None]


def default_geometry(
    *,
    n_electrodes: int = 32,
    n_background: int = 40,
    sources_per_region: int = 8,
    seed: int = 0,
    sphere_radius: float = DEFAULT_RADIUS,
    conductivity: float = DEFAULT_CONDUCTIVITY,
    region_spec: dict[str, Any] | None = None,
) -> HeadGeometry:
    """Electrodes on a Fibonacci cap; scout sources inside the subcortical balls; background elsewhere."""
    from services.scout import ball_centres, default_region_spec

    rng = np.random.default_rng(seed)
    balls = ball_centres(region_spec or default_region_spec())
    pos: list[np.ndarray] = []
    for _region, centre, radius in balls:
        # keep clear of the ball edge so membership is unambiguous
        pos.append(_points_in_ball(rng, centre, 0.8 * radius, sources_per_region))

    background: list[np.ndarray] = []
    limit = 0.6 * sphere_radius
    while len(background) < n_background:
        cand = _points_in_ball(rng, np.zeros(3), limit, 1)[0]
        if any(np.linalg.norm(cand - c) <= r * 1.2 for _, c, r in balls):
            continue
        background.append(cand)
    if background:
        pos.append(np.asarray(background))

    source_positions = np.concatenate(pos, axis=0)
    orientations = _unit_rows(rng, source_positions.shape[0])
    geometry = HeadGeometry(
        sphere_radius=sphere_radius,
        conductivity=conductivity,
        electrode_positions=fibonacci_cap(n_electrodes, sphere_radius),
        source_positions=source_positions,
        source_orientations=orientations,
    )
    geometry.validate()
    return geometry


def geometry_to_dict(geometry: HeadGeometry) -> dict[str, Any]:
    return {
        "sphere_radius": float(geometry.sphere_radius),
        "conductivity": float(geometry.conductivity),
        "electrode_positions": geometry.electrode_positions.tolist(),
        "electrode_labels": list(geometry.electrode_labels),
        "source_positions": geometry.source_positions.tolist(),
        "source_orientations": geometry.source_orientations.tolist(),
        "laterality": "positive x = right hemisphere",
    }


def geometry_from_dict(doc: dict[str, Any]) -> HeadGeometry:
    missing = [k for k in ("electrode_positions", "source_positions", "source_orientations") if doc.get(k) is None]
    if missing:
        raise ValidationError(f"geometry document is missing {missing}")
    geometry = HeadGeometry(
        sphere_radius=float(doc.get("sphere_radius", DEFAULT_RADIUS)),
        conductivity=float(doc.get("conductivity", DEFAULT_CONDUCTIVITY)),
        electrode_positions=np.asarray(doc["electrode_positions"], dtype=np.float64),
        source_positions=np.asarray(doc["source_positions"], dtype=np.float64),
        source_orientations=np.asarray(doc["source_orientations"], dtype=np.float64),
        electrode_labels=list(doc.get("electrode_labels") or []),
    )
    geometry.validate()
    return geometry


def save_recording(path: str | Path, rec: ScalpRecording) -> Path:
    p = write_tensor(path, rec.data, dtype="f64")
    write_json(
        sidecar_path(p),
        {
            "sampling_rate": rec.sampling_rate,
            "channel_labels": list(rec.channel_labels),
            "label": rec.label,
            "subject_id": rec.subject_id,
        },
    )
    return p


def load_recording(path: str | Path) -> ScalpRecording:
    data = read_tensor(path, rank=2)
    meta = read_json(sidecar_path(path))
    label = meta.get("label")
    return ScalpRecording(
        data=data,
        sampling_rate=float(meta["sampling_rate"]),
        channel_labels=list(meta["channel_labels"]),
        label=None if label is None else int(label),
        subject_id=meta.get("subject_id"),
    )
