"""Subcortical scouts: six ball-shaped regions and per-region averaging of source currents."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from services.errors import AtlasError, ShapeError, ValidationError
from services.inverse import SourceEstimate

STRUCTURES = ("Thalamus", "Hippocampus", "Amygdala")
REGION_NAMES = (
    "ThalamusL",
    "HippocampusL",
    "AmygdalaL",
    "ThalamusR",
    "HippocampusR",
    "AmygdalaR",
)
LEFT_REGIONS = REGION_NAMES[:3]
RIGHT_REGIONS = REGION_NAMES[3:]


def default_region_spec() -> dict[str, Any]:
    """Ball per structure; centre x is given as |x| and mirrored per hemisphere (metres)."""
    return {
        "Thalamus": {"center": [0.012, -0.01, 0.01], "radius": 0.008},
        "Hippocampus": {"center": [0.025, -0.02, -0.015], "radius": 0.008},
        "Amygdala": {"center": [0.022, 0.0, -0.02], "radius": 0.006},
    }


def ball_centres(region_spec: dict[str, Any]) -> list[tuple[str, np.ndarray, float]]:
    """(region name, centre, radius) in canonical region order."""
    missing = [s for s in STRUCTURES if s not in region_spec]
    if missing:
        raise AtlasError(f"region spec is missing structures {missing}")
    out: list[tuple[str, np.ndarray, float]] = []
    for side, sign in (("L", -1.0), ("R", 1.0)):
        for structure in STRUCTURES:
            entry = region_spec[structure]
            centre = np.asarray(entry["center"], dtype=np.float64).reshape(3).copy()
            radius = float(entry["radius"])
            if not radius > 0:
                raise AtlasError(f"{structure} radius must be positive, got {radius!r}")
            centre[0] = sign * abs(centre[0])
            out.append((f"{structure}{side}", centre, radius))
    return out


@dataclass(frozen=True)
class Atlas:
    regions: tuple[tuple[int, ...], ...]
    n_sources: int | None = None

    def __post_init__(self) -> None:
        if len(self.regions) != len(REGION_NAMES):
            raise AtlasError(f"atlas needs {len(REGION_NAMES)} regions, got {len(self.regions)}")
        seen: set[int] = set()
        for name, idx in zip(REGION_NAMES, self.regions):
            if not idx:
                raise AtlasError(f"region {name} is empty", details={"region": name})
            overlap = seen.intersection(idx)
            if overlap:
                raise AtlasError(f"region {name} shares sources {sorted(overlap)} with another region")
            seen.update(idx)
            if self.n_sources is not None and max(idx) >= self.n_sources:
                raise AtlasError(f"region {name} references source {max(idx)} >= {self.n_sources}")

    def region(self, name: str) -> tuple[int, ...]:
        return self.regions[REGION_NAMES.index(name)]


@dataclass
class ScoutMatrix:
    series: np.ndarray
    sampling_rate: float

    def __post_init__(self) -> None:
        self.series = np.asarray(self.series, dtype=np.float64)
        if self.series.ndim != 2 or self.series.shape[0] != len(REGION_NAMES):
            raise ShapeError(f"scout matrix must be 6 x T, got {self.series.shape}")
        if not np.all(np.isfinite(self.series)):
            raise ValidationError("scout matrix contains non-finite entries", stage="scout")


def build_subatlas(source_positions: np.ndarray, region_spec: dict[str, Any] | None = None) -> Atlas:
    pos = np.asarray(source_positions, dtype=np.float64).reshape(-1, 3)
    balls = ball_centres(region_spec or default_region_spec())

    for i, (name_a, c_a, r_a) in enumerate(balls):
        for name_b, c_b, r_b in balls[i + 1:]:
            if name_a[-1] == name_b[-1] and np.linalg.norm(c_a - c_b) < r_a + r_b:
                raise AtlasError(f"balls of {name_a} and {name_b} overlap")

    regions: list[tuple[int, ...]] = []
    for name, centre, radius in balls:
        right = name.endswith("R")
        side_ok = pos[:, 0] > 0 if right else pos[:, 0] <= 0
        inside = np.linalg.norm(pos - centre, axis=1) <= radius
        idx = tuple(int(j) for j in np.flatnonzero(side_ok & inside))
        if not idx:
            raise AtlasError(f"region {name} contains no sources", details={"region": name})
        regions.append(idx)
    return Atlas(regions=tuple(regions), n_sources=pos.shape[0])


def extract_scout_series(est: SourceEstimate, atlas: Atlas) -> ScoutMatrix:
    n = est.currents.shape[0]
    rows = []
    for name, idx in zip(REGION_NAMES, atlas.regions):
        if max(idx) >= n:
            raise ShapeError(f"region {name} references source {max(idx)} but estimate has {n}", stage="scout")
        rows.append(est.currents[list(idx)].mean(axis=0))
    return ScoutMatrix(series=np.stack(rows, axis=0), sampling_rate=est.sampling_rate)


def atlas_to_dict(atlas: Atlas) -> dict[str, Any]:
    return {
        "order": list(REGION_NAMES),
        "regions": {name: list(idx) for name, idx in zip(REGION_NAMES, atlas.regions)},
        "n_sources": atlas.n_sources,
    }


def atlas_from_dict(doc: dict[str, Any]) -> Atlas:
    regions = doc.get("regions", doc)
    missing = [name for name in REGION_NAMES if name not in regions]
    if missing:
        raise ValidationError(f"atlas document is missing regions {missing}", stage="scout")
    return Atlas(
        regions=tuple(tuple(int(j) for j in regions[name]) for name in REGION_NAMES),
        n_sources=doc.get("n_sources"),
    )


def region_source_indices(atlas: Atlas, names: Sequence[str] = REGION_NAMES) -> list[int]:
    out: list[int] = []
    for name in names:
        out.extend(atlas.region(name))
    return out
