"""Left/right hemisphere fusion: posterior sum and product, early fusion and tensor fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from services.errors import ShapeError, ValidationError
from services.neural import (
    N_CLASSES,
    PREDICT_BATCH,
    ConvNetSpec,
    Inputs,
    ModelParams,
    Posterior,
    batch_cross_entropy,
    init_dense,
    init_tower,
    softmax,
    tower_backward,
    tower_forward,
)

POSTERIOR_STRATEGIES = ("left", "right", "sum", "product")
LATENT_STRATEGIES = ("early", "tfn")
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class FusedDecision:
    prediction: int
    scores: np.ndarray


@dataclass
class FusionHeadParams:
    W: np.ndarray
    b: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in LATENT_STRATEGIES:
            raise ValidationError(f"fusion head kind must be one of {LATENT_STRATEGIES}, got {self.kind!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[1] != N_CLASSES or self.b.shape != (N_CLASSES,):
            raise ShapeError(f"fusion head must map to {N_CLASSES} logits, got W{self.W.shape} b{self.b.shape}")


def argmax_lowest(values: np.ndarray) -> np.ndarray:
    """Row-wise argmax; near-equal maxima resolve to the lowest class index."""
    v = np.atleast_2d(values)
    if v.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    top = v.max(axis=1, keepdims=True)
    near = v >= top - TIE_TOLERANCE * np.maximum(np.abs(top), 1.0)
    return np.argmax(near, axis=1)


def _probs(p: Posterior | np.ndarray) -> np.ndarray:
    return p.probs if isinstance(p, Posterior) else np.asarray(p, dtype=np.float64)


def fuse_sum(pL: Posterior | np.ndarray, pR: Posterior | np.ndarray) -> FusedDecision:
    raw = _probs(pL) + _probs(pR)
    return FusedDecision(prediction=int(argmax_lowest(raw)[0]), scores=raw / 2.0)


def fuse_product(pL: Posterior | np.ndarray, pR: Posterior | np.ndarray) -> FusedDecision:
    raw = _probs(pL) * _probs(pR)
    total = float(raw.sum())
    if total <= 0.0:
        return FusedDecision(prediction=fuse_sum(pL, pR).prediction, scores=np.full(raw.shape, 1.0 / raw.size))
    return FusedDecision(prediction=int(argmax_lowest(raw)[0]), scores=raw / total)


def fuse_posteriors(strategy: str, PL: np.ndarray, PR: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch version over (N, 3) posteriors; returns predictions and simplex scores."""
    PL = np.asarray(PL, dtype=np.float64)
    PR = np.asarray(PR, dtype=np.float64)
    if PL.shape != PR.shape or PL.ndim != 2 or PL.shape[1] != N_CLASSES:
        raise ShapeError(f"posterior batches must both be N x {N_CLASSES}, got {PL.shape} and {PR.shape}")
    if strategy == "left":
        return argmax_lowest(PL), PL.copy()
    if strategy == "right":
        return argmax_lowest(PR), PR.copy()
    if strategy == "sum":
        raw = PL + PR
        return argmax_lowest(raw), raw / 2.0
    if strategy == "product":
        raw = PL * PR
        totals = raw.sum(axis=1, keepdims=True)
        dead = totals[:, 0] <= 0.0
        preds = argmax_lowest(raw)
        if dead.any():
            preds[dead] = argmax_lowest(PL[dead] + PR[dead])
        scores = np.where(totals > 0, raw / np.where(totals > 0, totals, 1.0), 1.0 / N_CLASSES)
        return preds, scores
    raise ValidationError(f"{strategy!r} is not a posterior fusion strategy")


def early_fusion_vector(zL: np.ndarray, zR: np.ndarray) -> np.ndarray:
    return np.concatenate([zL, zR], axis=-1)


def tensor_fusion_vector(zL: np.ndarray, zR: np.ndarray) -> np.ndarray:
    """Row-major flatten of outer([zL; 1], [zR; 1]); batched over leading axes."""
    aL = np.concatenate([zL, np.ones(zL.shape[:-1] + (1,))], axis=-1)
    aR = np.concatenate([zR, np.ones(zR.shape[:-1] + (1,))], axis=-1)
    outer = aL[..., :, None] * aR[..., None, :]
    return outer.reshape(outer.shape[:-2] + (-1,))


def fused_dim(kind: str, dL: int, dR: int) -> int:
    return dL + dR if kind == "early" else (dL + 1) * (dR + 1)


def _head_predict(zL: np.ndarray, zR: np.ndarray, head: FusionHeadParams) -> Posterior:
    zL = np.asarray(zL, dtype=np.float64)
    zR = np.asarray(zR, dtype=np.float64)
    expected = fused_dim(head.kind, zL.shape[-1], zR.shape[-1])
    if head.W.shape[0] != expected:
        raise ShapeError(f"{head.kind} head expects fused dim {head.W.shape[0]}, latents give {expected}")
    fused = early_fusion_vector(zL, zR) if head.kind == "early" else tensor_fusion_vector(zL, zR)
    return Posterior(probs=softmax(fused @ head.W + head.b), latent=fused)


def early_fusion_predict(zL: np.ndarray, zR: np.ndarray, head: FusionHeadParams) -> Posterior:
    if head.kind != "early":
        raise ValidationError("early_fusion_predict needs an 'early' head")
    return _head_predict(zL, zR, head)


def tensor_fusion_predict(zL: np.ndarray, zR: np.ndarray, head: FusionHeadParams) -> Posterior:
    if head.kind != "tfn":
        raise ValidationError("tensor_fusion_predict needs a 'tfn' head")
    return _head_predict(zL, zR, head)


class FusionNetwork:
    """Left and right towers joined by an early-fusion or tensor-fusion head, trained end to end."""

    def __init__(self, spec: ConvNetSpec, kind: str):
        if kind not in LATENT_STRATEGIES:
            raise ValidationError(f"fusion kind must be one of {LATENT_STRATEGIES}, got {kind!r}")
        self.spec = spec
        self.kind = kind
        self.fused_dim = fused_dim(kind, spec.latent_dim, spec.latent_dim)

    def init(self, seed: int) -> ModelParams:
        rng = np.random.default_rng(seed)
        tensors = init_tower(self.spec, rng, prefix="left.")
        tensors.update(init_tower(self.spec, rng, prefix="right."))
        tensors.update(init_dense(rng, "head", self.fused_dim, N_CLASSES))
        return ModelParams(tensors, seed=int(seed))

    def head(self, p: ModelParams) -> FusionHeadParams:
        return FusionHeadParams(W=p["head.W"], b=p["head.b"], kind=self.kind)

    def _fuse(self, zL: np.ndarray, zR: np.ndarray) -> np.ndarray:
        return early_fusion_vector(zL, zR) if self.kind == "early" else tensor_fusion_vector(zL, zR)

    def _forward(self, p: ModelParams, XL: np.ndarray, XR: np.ndarray):
        zL, cache_l = tower_forward(p.tensors, XL, prefix="left.")
        zR, cache_r = tower_forward(p.tensors, XR, prefix="right.")
        fused = self._fuse(zL, zR)
        probs = softmax(fused @ p["head.W"] + p["head.b"])
        return probs, fused, (zL, cache_l), (zR, cache_r)

    def predict(self, p: ModelParams, inputs: Inputs, batch: int = PREDICT_BATCH) -> np.ndarray:
        XL = np.asarray(inputs[0], dtype=np.float64)
        XR = np.asarray(inputs[1], dtype=np.float64)
        out = [self._forward(p, XL[s:s + batch], XR[s:s + batch])[0] for s in range(0, XL.shape[0], batch)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, N_CLASSES))

    def loss_and_grads(
        self, p: ModelParams, inputs: Inputs, labels: np.ndarray, sw: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        XL = np.asarray(inputs[0], dtype=np.float64)
        XR = np.asarray(inputs[1], dtype=np.float64)
        if XL.shape[0] == 0 or XL.shape[0] != XR.shape[0] or labels.shape != (XL.shape[0],):
            raise ShapeError(f"fusion batch mismatch: {XL.shape}, {XR.shape}, labels {labels.shape}", stage="fuse")
        probs, fused, (zL, cache_l), (zR, cache_r) = self._forward(p, XL, XR)
        loss, dlogits = batch_cross_entropy(probs, labels, sw)
        grads = {"head.W": fused.T @ dlogits, "head.b": dlogits.sum(axis=0)}
        dfused = dlogits @ p["head.W"].T
        dL = zL.shape[1]
        dR = zR.shape[1]
        if self.kind == "early":
            dzL, dzR = dfused[:, :dL], dfused[:, dL:]
        else:
            dF = dfused.reshape(-1, dL + 1, dR + 1)
            aL = np.concatenate([zL, np.ones((zL.shape[0], 1))], axis=1)
            aR = np.concatenate([zR, np.ones((zR.shape[0], 1))], axis=1)
            dzL = np.einsum("bij,bj->bi", dF[:, :dL, :], aR)
            dzR = np.einsum("bij,bi->bj", dF[:, :, :dR], aL)
        grads.update(tower_backward(p.tensors, cache_l, dzL, prefix="left."))
        grads.update(tower_backward(p.tensors, cache_r, dzR, prefix="right."))
        return loss, grads


def strategy_accuracies(
    PL: np.ndarray, PR: np.ndarray, labels: Sequence[int], latent_probs: dict[str, np.ndarray] | None = None
) -> dict[str, float]:
    y = np.asarray(labels, dtype=np.int64)
    out: dict[str, float] = {}
    for strategy in POSTERIOR_STRATEGIES:
        preds, _ = fuse_posteriors(strategy, PL, PR)
        out[strategy] = float(np.mean(preds == y)) if y.size else 0.0
    for kind, probs in (latent_probs or {}).items():
        out[kind] = float(np.mean(argmax_lowest(probs) == y)) if y.size else 0.0
    return out
