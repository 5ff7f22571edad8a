"""Pipeline configuration: JSON document + ``SCWT_*`` environment overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from dotenv import load_dotenv

from services.artifacts import config_hash
from services.errors import MissingArtifactError, SchemaError

ROOT = Path(__file__).resolve().parents[1]
load_dotenv(ROOT / ".env")

FUSION_STRATEGIES = ("left", "right", "sum", "product", "early", "tfn")
PREPROCESS_PRESETS = ("order8", "order4")

# None means "no default value"; such keys accept any JSON value or null.
DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "geometry": {
        "sphere_radius": 0.09,
        "conductivity": 0.33,
        "n_electrodes": 32,
        "n_background": 40,
        "sources_per_region": 8,
        "series_order": 60,
        "electrode_positions": None,
        "source_positions": None,
        "source_orientations": None,
    },
    "atlas": {
        "regions": None,
    },
    "cohort": {
        "subjects_per_class": 9,
        "duration_s": 4.0,
        "sampling_rate": 1000.0,
        "noise_sigma": 0.5,
        "source_amplitude": 20.0,
        "background_level": 0.1,
        "profiles": None,
    },
    "preprocess": {
        "preset": "order8",
        "low_hz": 0.5,
        "high_hz": 40.0,
        "target_rate": 512.0,
    },
    "inverse": {
        "lambda": None,
        "snr": 3.0,
        "standardized": False,
    },
    "wavelet": {
        "omega0": 6.0,
        "f_min": 0.5,
        "f_max": 40.0,
    },
    "model": {
        "filters": [16, 32, 64],
        "latent_dim": 64,
    },
    "train": {
        "lr": 1e-3,
        "batch": 32,
        "patience": 20,
        "max_steps": 2000,
        "seed": None,
    },
    "fusion": {
        "strategy": "product",
        "latent_heads": ["early", "tfn"],
    },
    "split": {
        "seed": None,
        "subject_level": False,
    },
}


def _env(name: str, default: str = "") -> str:
    return (os.getenv(name) or default).strip()


def _to_bool(value: str, default: bool = False) -> bool:
    raw = (value or "").strip().lower()
    if not raw:
        return default
    return raw in {"1", "true", "yes", "y", "on"}


def _to_int(raw: str, default: int | None) -> int | None:
    try:
        return int((raw or "").strip())
    except ValueError:
        return default


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _check_value(path: str, default: Any, value: Any) -> None:
    if default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif _is_number(default):
        ok = _is_number(value) or (value is None and path in _NULLABLE)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise SchemaError(
            f"config key {path!r} has invalid type {type(value).__name__} (expected like {default!r})",
            details={"key": path},
        )


_NULLABLE = {"inverse.snr"}


def _merge(defaults: dict[str, Any], given: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise SchemaError(f"unknown config key {path!r}", details={"key": path})
        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise SchemaError(f"config section {path!r} must be an object", details={"key": path})
            out[key] = _merge(default, value, prefix=f"{path}.")
            continue
        _check_value(path, default, value)
        out[key] = value
    return out


def _check_semantics(data: dict[str, Any]) -> None:
    strategy = data["fusion"]["strategy"]
    if strategy not in FUSION_STRATEGIES:
        raise SchemaError(f"fusion.strategy must be one of {FUSION_STRATEGIES}, got {strategy!r}")
    for head in data["fusion"]["latent_heads"]:
        if head not in ("early", "tfn"):
            raise SchemaError(f"fusion.latent_heads entries must be 'early' or 'tfn', got {head!r}")
    if data["preprocess"]["preset"] not in PREPROCESS_PRESETS:
        raise SchemaError(f"preprocess.preset must be one of {PREPROCESS_PRESETS}")
    inv = data["inverse"]
    if inv["lambda"] is None and inv["snr"] is None:
        raise SchemaError("inverse needs either 'lambda' or 'snr'")
    if inv["lambda"] is not None and not _is_number(inv["lambda"]):
        raise SchemaError("inverse.lambda must be a number")
    filters = data["model"]["filters"]
    if not filters or not all(isinstance(f, int) and f > 0 for f in filters):
        raise SchemaError("model.filters must be a non-empty list of positive integers")
    for key in ("train.seed", "split.seed"):
        section, name = key.split(".")
        value = data[section][name]
        if value is not None and not isinstance(value, int):
            raise SchemaError(f"{key} must be an integer or null")
    if not isinstance(data["seed"], int):
        raise SchemaError("seed must be an integer")


@dataclass(frozen=True)
class PipelineConfig:
    data: dict[str, Any]

    def __getitem__(self, section: str) -> Any:
        return self.data[section]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def train_seed(self) -> int:
        value = self.data["train"]["seed"]
        return self.seed if value is None else int(value)

    @property
    def split_seed(self) -> int:
        value = self.data["split"]["seed"]
        return self.seed if value is None else int(value)

    def to_dict(self) -> dict[str, Any]:
        return copy.deepcopy(self.data)

    def hash(self) -> str:
        return config_hash(self.data)


def build_config(
    given: dict[str, Any] | None = None,
    *,
    seed: int | None = None,
    fusion: str | None = None,
    subject_level_split: bool | None = None,
) -> PipelineConfig:
    if given is not None and not isinstance(given, dict):
        raise SchemaError("config document must be a JSON object")
    data = _merge(DEFAULT_CONFIG, given or {})

    env_seed = _to_int(_env("SCWT_SEED"), None)
    env_fusion = _env("SCWT_FUSION")
    if seed is None and env_seed is not None:
        seed = env_seed
    if fusion is None and env_fusion:
        fusion = env_fusion

    if seed is not None:
        data["seed"] = int(seed)
        data["train"]["seed"] = None
        data["split"]["seed"] = None
    if fusion is not None:
        data["fusion"]["strategy"] = fusion
    if subject_level_split:
        data["split"]["subject_level"] = True

    _check_semantics(data)
    return PipelineConfig(data=data)


def load_config(path: str | Path | None, **overrides: Any) -> PipelineConfig:
    if path is None:
        return build_config(None, **overrides)
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file not found: {p}", stage="config")
    try:
        given = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"config {p.name} is not valid JSON: {e}") from e
    return build_config(given, **overrides)


def default_out_dir() -> Path:
    raw = _env("SCWT_OUT_DIR", "runs/latest")
    p = Path(raw)
    return p if p.is_absolute() else ROOT / p


def result_markers_enabled() -> bool:
    return _to_bool(_env("SCWT_LOG_JSON", "1"), True)
