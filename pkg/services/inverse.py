"""Regularized minimum-norm inverse kernel with optional sLORETA standardization.

kernel = A^T [A A^T + lambda H]^+ where H is the average reference operator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from services.errors import DegeneracyError, ShapeError, ValidationError
from services.forward import LeadField, ScalpRecording
from services.tensor_container import read_json, read_tensor, sidecar_path, write_json, write_tensor

PINV_RELATIVE_CUTOFF = 1e-10
DEFAULT_SNR = 3.0


@dataclass
class InverseKernel:
    kernel: np.ndarray
    lam: float
    standardized: bool = False
    resolution_diag: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 2:
            raise ShapeError(f"inverse kernel must be a matrix, got shape {self.kernel.shape}")
        if not np.all(np.isfinite(self.kernel)):
            raise ValidationError("inverse kernel contains non-finite entries", stage="inverse")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ValidationError(f"lambda must be finite and >= 0, got {self.lam!r}", stage="inverse")
        if self.standardized:
            if self.resolution_diag is None:
                raise ValidationError("standardized kernel needs its resolution diagonal", stage="inverse")
            self.resolution_diag = np.asarray(self.resolution_diag, dtype=np.float64)
            if np.any(self.resolution_diag <= 0):
                raise ValidationError("resolution diagonal must be strictly positive", stage="inverse")


@dataclass
class SourceEstimate:
    currents: np.ndarray
    sampling_rate: float

    def __post_init__(self) -> None:
        self.currents = np.asarray(self.currents, dtype=np.float64)
        if self.currents.ndim != 2:
            raise ShapeError(f"source currents must be sources x samples, got {self.currents.shape}")
        if not np.all(np.isfinite(self.currents)):
            raise ValidationError("source estimate contains non-finite entries", stage="inverse")


def average_reference_operator(m: int) -> np.ndarray:
    if int(m) < 2:
        raise ValidationError(f"average reference needs >= 2 channels, got {m}", stage="inverse")
    m = int(m)
    return np.eye(m) - np.full((m, m), 1.0 / m)


def _symmetric_pinv(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    w, V = linalg.eigh(sym)
    top = float(np.max(np.abs(w))) if w.size else 0.0
    if top == 0.0:
        return np.zeros_like(sym)
    keep = np.abs(w) > PINV_RELATIVE_CUTOFF * top
    inv_w = np.zeros_like(w)
    inv_w[keep] = 1.0 / w[keep]
    return (V * inv_w) @ V.T


def min_norm_kernel(lf: LeadField, lam: float) -> InverseKernel:
    lam = float(lam)
    if not math.isfinite(lam):
        raise ValidationError(f"lambda must be finite, got {lam!r}", stage="inverse")
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam!r}", stage="inverse")
    A = lf.gain
    H = average_reference_operator(A.shape[0])
    middle = _symmetric_pinv(A @ A.T + lam * H)
    return InverseKernel(kernel=A.T @ middle, lam=lam, standardized=False)


def sloreta_standardize(k: InverseKernel, lf: LeadField) -> InverseKernel:
    if k.standardized:
        raise ValidationError("kernel is already standardized", stage="inverse")
    if k.kernel.shape != (lf.n_sources, lf.n_channels):
        raise ShapeError(f"kernel {k.kernel.shape} does not match lead field {lf.gain.shape}", stage="inverse")
    # diag(K A) without forming the N x N product
    diag = np.einsum("ij,ji->i", k.kernel, lf.gain)
    bad = np.flatnonzero(~(diag > 0))
    if bad.size:
        j = int(bad[0])
        raise DegeneracyError(
            f"resolution diagonal is not positive at source {j} (value {diag[j]!r})",
            details={"source": j, "value": float(diag[j])},
        )
    return InverseKernel(
        kernel=k.kernel / np.sqrt(diag)[:, None],
        lam=k.lam,
        standardized=True,
        resolution_diag=diag,
    )


def regularization_parameter(lf: LeadField, snr: float) -> float:
    if not (snr > 0 and math.isfinite(snr)):
        raise ValidationError(f"snr must be positive, got {snr!r}", stage="inverse")
    A = lf.gain
    # trace(A A^T) is the squared Frobenius norm
    return float(np.sum(A * A)) / (A.shape[0] * float(snr) ** 2)


def apply_inverse(k: InverseKernel, rec: ScalpRecording) -> SourceEstimate:
    if k.kernel.shape[1] != rec.data.shape[0]:
        raise ShapeError(
            f"kernel expects {k.kernel.shape[1]} channels, recording has {rec.data.shape[0]}",
            stage="inverse",
        )
    return SourceEstimate(currents=k.kernel @ rec.data, sampling_rate=rec.sampling_rate)


def build_kernel(lf: LeadField, *, lam: float | None = None, snr: float | None = DEFAULT_SNR,
                 standardized: bool = False) -> InverseKernel:
    """Kernel from config-style knobs: explicit lambda wins over snr."""
    if lam is None:
        if snr is None:
            raise ValidationError("either lambda or snr is required", stage="inverse")
        lam = regularization_parameter(lf, snr)
    k = min_norm_kernel(lf, lam)
    return sloreta_standardize(k, lf) if standardized else k


def save_kernel(path: str | Path, k: InverseKernel) -> Path:
    p = write_tensor(path, k.kernel, dtype="f64")
    meta = {"lambda": k.lam, "standardized": bool(k.standardized)}
    if k.resolution_diag is not None:
        meta["resolution_diag"] = k.resolution_diag.tolist()
    write_json(sidecar_path(p), meta)
    return p


def load_kernel(path: str | Path) -> InverseKernel:
    kernel = read_tensor(path, rank=2)
    meta = read_json(sidecar_path(path))
    diag = meta.get("resolution_diag")
    return InverseKernel(
        kernel=kernel,
        lam=float(meta["lambda"]),
        standardized=bool(meta.get("standardized", False)),
        resolution_diag=None if diag is None else np.asarray(diag, dtype=np.float64),
    )
