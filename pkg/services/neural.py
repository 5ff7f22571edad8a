"""Compact convolutional classifier with hand-written reverse-mode gradients.

Tensors are NHWC float64. A tower is ``conv -> ReLU -> 2x2 max-pool`` blocks, a flatten and a
ReLU dense latent layer (z); the classifier adds a dense ``out`` head and softmax. Parameters
live in a flat ``name -> array`` dict (``conv0.W``, ``conv0.b``, ..., ``latent.W``, ``out.W``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.errors import NumericError, ShapeError, ValidationError
from services.tensor_container import read_json, read_tensor, sidecar_path, write_json, write_tensor

N_CLASSES = 3
CLASS_NAMES = ("AD", "FTD_or_MCI", "HC")
LOG_CLAMP = 1e-12
PREDICT_BATCH = 64

Inputs = tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ConvNetSpec:
    input_shape: tuple[int, int, int] = (128, 128, 3)
    filters: tuple[int, ...] = (16, 32, 64)
    latent_dim: int = 64
    output_dim: int = N_CLASSES
    kernel_size: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        if len(self.input_shape) != 3:
            raise ValidationError(f"input_shape must be (H, W, C), got {self.input_shape}", stage="train")
        if not self.filters or min(self.filters) < 1:
            raise ValidationError("at least one conv block with positive filters is required", stage="train")
        if self.latent_dim < 2:
            raise ValidationError(f"latent_dim must be >= 2, got {self.latent_dim}", stage="train")
        if self.output_dim != N_CLASSES:
            raise ValidationError(f"output_dim must be {N_CLASSES}, got {self.output_dim}", stage="train")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValidationError(f"kernel_size must be a positive odd integer, got {self.kernel_size}", stage="train")
        h, w = self.pooled_hw
        if h < 1 or w < 1:
            raise ValidationError(f"input {self.input_shape} vanishes after {len(self.filters)} pools", stage="train")

    @property
    def pooled_hw(self) -> tuple[int, int]:
        h, w = self.input_shape[:2]
        for _ in self.filters:
            h, w = h // 2, w // 2
        return h, w

    @property
    def flat_dim(self) -> int:
        h, w = self.pooled_hw
        return h * w * self.filters[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "filters": list(self.filters),
            "latent_dim": self.latent_dim,
            "output_dim": self.output_dim,
            "kernel_size": self.kernel_size,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ConvNetSpec":
        return cls(
            input_shape=tuple(doc["input_shape"]),
            filters=tuple(doc["filters"]),
            latent_dim=int(doc["latent_dim"]),
            output_dim=int(doc.get("output_dim", N_CLASSES)),
            kernel_size=int(doc.get("kernel_size", 3)),
        )


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, seed=self.seed)


@dataclass
class Posterior:
    probs: np.ndarray
    latent: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.latent = np.asarray(self.latent, dtype=np.float64)
        if self.probs.shape != (N_CLASSES,):
            raise ShapeError(f"posterior must have {N_CLASSES} entries, got {self.probs.shape}")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise NumericError("posterior is not a probability vector")
        if not np.all(np.isfinite(self.latent)):
            raise NumericError("posterior latent contains non-finite values")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    class_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    patience: int = 20
    max_steps: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if not self.learning_rate > 0 or self.batch_size < 1 or self.max_steps < 1:
            raise ValidationError("learning_rate, batch_size and max_steps must be positive", stage="train")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}", stage="train")
        if len(self.class_weights) != N_CLASSES or min(self.class_weights) <= 0:
            raise ValidationError(f"class_weights must be {N_CLASSES} positive numbers", stage="train")


def compute_class_weights(counts: Sequence[int]) -> np.ndarray:
    """w_c = max_count / count_c, so the majority class weighs exactly 1."""
    c = np.asarray(counts, dtype=np.float64)
    if c.shape != (N_CLASSES,):
        raise ValidationError(f"expected {N_CLASSES} class counts, got {c.shape}", stage="train")
    if np.any(c <= 0):
        raise ValidationError(f"every class needs at least one sample, got counts {c.tolist()}", stage="train")
    return c.max() / c


# --- init ---


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_dense(rng: np.random.Generator, name: str, n_in: int, n_out: int) -> dict[str, np.ndarray]:
    return {f"{name}.W": _he_uniform(rng, (n_in, n_out), n_in), f"{name}.b": np.zeros(n_out)}


def init_tower(spec: ConvNetSpec, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    k = spec.kernel_size
    c_in = spec.input_shape[2]
    for i, f in enumerate(spec.filters):
        tensors[f"{prefix}conv{i}.W"] = _he_uniform(rng, (k, k, c_in, f), k * k * c_in)
        tensors[f"{prefix}conv{i}.b"] = np.zeros(f)
        c_in = f
    tensors.update(init_dense(rng, f"{prefix}latent", spec.flat_dim, spec.latent_dim))
    return tensors


def init_params(spec: ConvNetSpec, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors = init_tower(spec, rng)
    tensors.update(init_dense(rng, "out", spec.latent_dim, spec.output_dim))
    return ModelParams(tensors, seed=int(seed))


# --- layers ---


def _check_finite(arr: np.ndarray, layer: int, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation at layer {layer} ({what})", stage="train", details={"layer": layer})


def conv2d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 same-padded convolution; returns the output and the im2col matrix."""
    k = W.shape[0]
    pad = k // 2
    B, H, Wd, C = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(B * H * Wd, C * k * k)
    Wm = W.transpose(2, 0, 1, 3).reshape(C * k * k, -1)
    return (cols @ Wm).reshape(B, H, Wd, -1) + b, cols


def conv2d_backward(
    dout: np.ndarray, x_shape: tuple[int, ...], cols: np.ndarray, W: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    k, _, C, F = W.shape
    pad = k // 2
    B, H, Wd, _ = x_shape
    d2 = dout.reshape(-1, F)
    dW = (cols.T @ d2).reshape(C, k, k, F).transpose(1, 2, 0, 3)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dxp = np.zeros((B, H + 2 * pad, Wd + 2 * pad, C))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + H, j:j + Wd, :] += dout @ W[i, j].T
    return dxp[:, pad:pad + H, pad:pad + Wd, :], dW, db


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max-pool; odd trailing rows/cols are cropped; ties go to the first index."""
    B, H, W, C = x.shape
    H2, W2 = H // 2, W // 2
    blocks = (
        x[:, :2 * H2, :2 * W2, :]
        .reshape(B, H2, 2, W2, 2, C)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(B, H2, W2, C, 4)
    )
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def maxpool_backward(dout: np.ndarray, x_shape: tuple[int, ...], arg: np.ndarray) -> np.ndarray:
    B, H2, W2, C = dout.shape
    routed = (arg[..., None] == np.arange(4)) * dout[..., None]
    dblocks = routed.reshape(B, H2, W2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * H2, 2 * W2, C)
    dx = np.zeros(x_shape)
    dx[:, :2 * H2, :2 * W2, :] = dblocks
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# --- tower ---


@dataclass
class TowerCache:
    blocks: list[tuple[Any, ...]] = field(default_factory=list)
    pooled_shape: tuple[int, ...] = ()
    flat: np.ndarray | None = None
    pre_latent: np.ndarray | None = None


def n_conv_blocks(tensors: dict[str, np.ndarray], prefix: str = "") -> int:
    n = 0
    while f"{prefix}conv{n}.W" in tensors:
        n += 1
    return n


def tower_forward(tensors: dict[str, np.ndarray], x: np.ndarray, prefix: str = "") -> tuple[np.ndarray, TowerCache]:
    n_blocks = n_conv_blocks(tensors, prefix)
    if n_blocks == 0:
        raise ShapeError(f"no conv blocks under prefix {prefix!r}", stage="train")
    c_in = tensors[f"{prefix}conv0.W"].shape[2]
    if x.ndim != 4 or x.shape[-1] != c_in:
        raise ShapeError(f"tower expects N x H x W x {c_in} input, got {x.shape}", stage="train")
    cache = TowerCache()
    h = x
    for i in range(n_blocks):
        pre, cols = conv2d_forward(h, tensors[f"{prefix}conv{i}.W"], tensors[f"{prefix}conv{i}.b"])
        _check_finite(pre, i, "conv")
        act = np.maximum(pre, 0.0)
        pooled, arg = maxpool_forward(act)
        cache.blocks.append((h.shape, cols, pre, act.shape, arg))
        h = pooled
    cache.pooled_shape = h.shape
    cache.flat = h.reshape(h.shape[0], -1)
    W = tensors[f"{prefix}latent.W"]
    if cache.flat.shape[1] != W.shape[0]:
        raise ShapeError(f"flattened size {cache.flat.shape[1]} does not match latent layer {W.shape}", stage="train")
    cache.pre_latent = cache.flat @ W + tensors[f"{prefix}latent.b"]
    _check_finite(cache.pre_latent, n_blocks, "latent")
    return np.maximum(cache.pre_latent, 0.0), cache


def tower_backward(
    tensors: dict[str, np.ndarray], cache: TowerCache, dz: np.ndarray, prefix: str = ""
) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    d_pre = dz * (cache.pre_latent > 0)
    grads[f"{prefix}latent.W"] = cache.flat.T @ d_pre
    grads[f"{prefix}latent.b"] = d_pre.sum(axis=0)
    dh = (d_pre @ tensors[f"{prefix}latent.W"].T).reshape(cache.pooled_shape)
    for i in reversed(range(len(cache.blocks))):
        x_shape, cols, pre, act_shape, arg = cache.blocks[i]
        d_conv = maxpool_backward(dh, act_shape, arg) * (pre > 0)
        dh, dW, db = conv2d_backward(d_conv, x_shape, cols, tensors[f"{prefix}conv{i}.W"], need_dx=i > 0)
        grads[f"{prefix}conv{i}.W"] = dW
        grads[f"{prefix}conv{i}.b"] = db
    return grads


# --- loss ---


def sample_weights(labels: np.ndarray, class_weights: Sequence[float]) -> np.ndarray:
    return np.asarray(class_weights, dtype=np.float64)[np.asarray(labels, dtype=np.int64)]


def weighted_cross_entropy(post: Posterior, label: int, weights: Sequence[float]) -> float:
    p = max(float(post.probs[int(label)]), LOG_CLAMP)
    return -float(weights[int(label)]) * math.log(p)


def batch_cross_entropy(probs: np.ndarray, labels: np.ndarray, sw: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted mean loss sum(w l) / sum(w) and its gradient w.r.t. the logits.

    A batch equals the same rows repeated by integer weight. The batch gradient is the
    plain mean of per-row gradients only when all weights are equal; otherwise it is
    their w-weighted mean. For a single row the weight cancels.
    """
    rows = np.arange(labels.shape[0])
    nll = -np.log(np.clip(probs[rows, labels], LOG_CLAMP, None))
    total = float(sw.sum())
    loss = float(np.dot(sw, nll)) / total
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    return loss, dlogits * (sw / total)[:, None]


def _check_batch(images: np.ndarray, labels: np.ndarray) -> None:
    if images.shape[0] == 0:
        raise ValidationError("batch is empty", stage="train")
    if labels.shape != (images.shape[0],):
        raise ShapeError(f"{images.shape[0]} images but labels of shape {labels.shape}", stage="train")


def batch_loss_and_grads(
    p: ModelParams, images: np.ndarray, labels: np.ndarray, class_weights: Sequence[float]
) -> tuple[float, dict[str, np.ndarray]]:
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_batch(x, y)
    loss, grads = _classifier_loss_and_grads(p.tensors, x, y, sample_weights(y, class_weights))
    return loss, grads


def _classifier_loss_and_grads(
    tensors: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray, sw: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    z, cache = tower_forward(tensors, x)
    logits = z @ tensors["out.W"] + tensors["out.b"]
    _check_finite(logits, len(cache.blocks) + 1, "out")
    loss, dlogits = batch_cross_entropy(softmax(logits), y, sw)
    grads = {"out.W": z.T @ dlogits, "out.b": dlogits.sum(axis=0)}
    grads.update(tower_backward(tensors, cache, dlogits @ tensors["out.W"].T))
    return loss, grads


def backward_gradients(
    p: ModelParams, images: np.ndarray, labels: np.ndarray, class_weights: Sequence[float]
) -> dict[str, np.ndarray]:
    return batch_loss_and_grads(p, images, labels, class_weights)[1]


def _classifier_forward(tensors: dict[str, np.ndarray], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z, cache = tower_forward(tensors, x)
    logits = z @ tensors["out.W"] + tensors["out.b"]
    _check_finite(logits, len(cache.blocks) + 1, "out")
    return softmax(logits), z


def forward_pass(p: ModelParams, image: np.ndarray) -> Posterior:
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValidationError("input image contains non-finite values", stage="train")
    probs, z = _classifier_forward(p.tensors, x[None])
    return Posterior(probs=probs[0], latent=z[0])


def predict_proba(p: ModelParams, images: np.ndarray, batch: int = PREDICT_BATCH) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    out = [_classifier_forward(p.tensors, x[s:s + batch])[0] for s in range(0, x.shape[0], batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, N_CLASSES))


# --- optimizer ---


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, p: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in p.tensors.items()},
            v={k: np.zeros_like(v) for k, v in p.tensors.items()},
        )


def adam_step(
    p: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam; updates ``p`` and ``state`` in place and returns them."""
    for name in sorted(grads):
        g = grads[name]
        if name not in p.tensors or g.shape != p.tensors[name].shape or state.m[name].shape != g.shape:
            raise ShapeError(f"gradient/state shape mismatch for {name}", stage="train")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", stage="train", details={"param": name})
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(grads):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.tensors[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return p, state


# --- training ---


class Model(Protocol):
    def init(self, seed: int) -> ModelParams: ...

    def predict(self, p: ModelParams, inputs: Inputs) -> np.ndarray: ...

    def loss_and_grads(
        self, p: ModelParams, inputs: Inputs, labels: np.ndarray, sw: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]: ...


class ConvClassifier:
    """Single-tower classifier over one image stream."""

    def __init__(self, spec: ConvNetSpec):
        self.spec = spec

    def init(self, seed: int) -> ModelParams:
        return init_params(self.spec, seed)

    def predict(self, p: ModelParams, inputs: Inputs) -> np.ndarray:
        return predict_proba(p, inputs[0])

    def loss_and_grads(
        self, p: ModelParams, inputs: Inputs, labels: np.ndarray, sw: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        x = np.asarray(inputs[0], dtype=np.float64)
        _check_batch(x, labels)
        return _classifier_loss_and_grads(p.tensors, x, labels, sw)


@dataclass
class LabeledData:
    inputs: Inputs
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for arr in self.inputs:
            if arr.shape[0] != self.labels.shape[0]:
                raise ShapeError(f"input rows {arr.shape[0]} != labels {self.labels.shape[0]}", stage="train")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx: np.ndarray) -> "LabeledData":
        return LabeledData(inputs=tuple(arr[idx] for arr in self.inputs), labels=self.labels[idx])


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict[str, Any]]
    best_step: int
    best_val_acc: float
    stopped_step: int


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if labels.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def train_with_early_stopping(
    model: Model | ConvNetSpec,
    train: LabeledData,
    val: LabeledData,
    cfg: TrainConfig,
    on_step: Callable[[dict[str, Any]], None] | None = None,
) -> TrainResult:
    """Adam over shuffled mini-batches; one step = one pass + validation; stop after ``patience`` flat steps."""
    if isinstance(model, ConvNetSpec):
        model = ConvClassifier(model)
    present = set(np.unique(train.labels).tolist())
    missing = [c for c in range(N_CLASSES) if c not in present]
    if missing:
        raise ValidationError(f"training data lacks classes {missing}", stage="train", details={"missing": missing})
    if len(val) == 0:
        raise ValidationError("validation set is empty", stage="train")

    params = model.init(cfg.seed)
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    weights_all = sample_weights(train.labels, cfg.class_weights)

    best = params.copy()
    best_acc = -1.0
    best_step = 0
    flat_steps = 0
    history: list[dict[str, Any]] = []
    step = 0
    for step in range(1, cfg.max_steps + 1):
        order = rng.permutation(len(train))
        loss_sum = 0.0
        weight_sum = 0.0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train.subset(idx)
            sw = weights_all[idx]
            loss, grads = model.loss_and_grads(params, batch.inputs, batch.labels, sw)
            adam_step(params, grads, state, cfg.learning_rate)
            loss_sum += loss * float(sw.sum())
            weight_sum += float(sw.sum())

        val_acc = accuracy(model.predict(params, val.inputs), val.labels)
        record = {"step": step, "train_loss": loss_sum / weight_sum, "val_acc": val_acc}
        history.append(record)
        if on_step is not None:
            on_step(record)

        if val_acc > best_acc:
            best_acc = val_acc
            best_step = step
            best = params.copy()
            flat_steps = 0
        else:
            flat_steps += 1
            if flat_steps >= cfg.patience:
                break

    return TrainResult(params=best, history=history, best_step=best_step, best_val_acc=best_acc, stopped_step=step)


# --- checkpoints ---


def save_checkpoint(path: str | Path, p: ModelParams, meta: dict[str, Any]) -> Path:
    names = p.names()
    flat = np.concatenate([p.tensors[n].ravel() for n in names]) if names else np.zeros(0)
    out = write_tensor(path, flat, dtype="f64")
    doc = dict(meta)
    doc["seed"] = p.seed
    doc["tensors"] = [{"name": n, "shape": list(p.tensors[n].shape)} for n in names]
    write_json(sidecar_path(out), doc)
    return out


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict[str, Any]]:
    flat = read_tensor(path, rank=1)
    meta = read_json(sidecar_path(path))
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in meta["tensors"]:
        shape = tuple(int(d) for d in entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        if offset + size > flat.shape[0]:
            raise ShapeError(f"checkpoint {Path(path).name} is shorter than its tensor table", stage="train")
        tensors[entry["name"]] = flat[offset:offset + size].reshape(shape).copy()
        offset += size
    if offset != flat.shape[0]:
        raise ShapeError(f"checkpoint {Path(path).name} has {flat.shape[0] - offset} unused values", stage="train")
    return ModelParams(tensors, seed=int(meta.get("seed", 0))), meta
