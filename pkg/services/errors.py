from __future__ import annotations

from typing import Any


class ScwtError(RuntimeError):
    """Base toolkit error; ``stage`` names the module or pipeline stage that raised it."""

    stage_default = "toolkit"

    def __init__(self, message: str, *, stage: str | None = None, details: dict[str, Any] | None = None):
        super().__init__(message)
        self.stage = stage or self.stage_default
        self.details = details or {}


class ValidationError(ScwtError):
    stage_default = "validation"


class ShapeError(ScwtError):
    stage_default = "shape"


class FormatError(ScwtError):
    stage_default = "format"


class GeometryError(ScwtError):
    stage_default = "geometry"


class AtlasError(ScwtError):
    stage_default = "atlas"


class DegeneracyError(ScwtError):
    stage_default = "inverse"


class NumericError(ScwtError):
    stage_default = "numeric"


class SchemaError(ScwtError):
    stage_default = "config"


class MissingArtifactError(ScwtError):
    stage_default = "artifacts"


EXIT_MISSING_ARTIFACT = 2
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4
EXIT_OTHER = 1


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, MissingArtifactError):
        return EXIT_MISSING_ARTIFACT
    if isinstance(exc, SchemaError):
        return EXIT_SCHEMA
    if isinstance(exc, (NumericError, DegeneracyError)):
        return EXIT_NUMERIC
    return EXIT_OTHER
