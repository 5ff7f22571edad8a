from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
from step_common import run_step_main

from services.artifacts import log, require, stage_dir
from services.config import PipelineConfig
from services.evaluation import SplitManifest, split_dataset
from services.neural import (
    ConvClassifier,
    ConvNetSpec,
    LabeledData,
    TrainConfig,
    compute_class_weights,
    save_checkpoint,
    train_with_early_stopping,
)
from services.tensor_container import read_json, read_tensor, write_json

STAGE = "train"
TAG = "TRAIN"
SIDES = ("left", "right")


@dataclass
class ImageSet:
    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray
    subject_ids: list[str]


def load_image_set(out_root: Path) -> ImageSet:
    cwt_dir = Path(out_root) / "cwt"
    index = read_json(require(cwt_dir / "index.json", "scalogram index"))
    return ImageSet(
        left=read_tensor(require(cwt_dir / "left.scwt", "left scalograms"), rank=4),
        right=read_tensor(require(cwt_dir / "right.scwt", "right scalograms"), rank=4),
        labels=np.asarray(index["labels"], dtype=np.int64),
        subject_ids=list(index["subject_ids"]),
    )


def load_split(out_root: Path) -> SplitManifest:
    return SplitManifest.from_dict(read_json(require(Path(out_root) / STAGE / "split.json", "split manifest")))


def net_spec(cfg: PipelineConfig, images: ImageSet) -> ConvNetSpec:
    m = cfg["model"]
    return ConvNetSpec(
        input_shape=tuple(images.left.shape[1:]),
        filters=tuple(m["filters"]),
        latent_dim=int(m["latent_dim"]),
    )


def train_config(cfg: PipelineConfig, train_labels: np.ndarray) -> TrainConfig:
    t = cfg["train"]
    counts = np.bincount(train_labels, minlength=3)
    return TrainConfig(
        learning_rate=float(t["lr"]),
        batch_size=int(t["batch"]),
        class_weights=tuple(compute_class_weights(counts).tolist()),
        patience=int(t["patience"]),
        max_steps=int(t["max_steps"]),
        seed=cfg.train_seed,
    )


def step_logger(tag: str, name: str) -> Callable[[dict[str, Any]], None]:
    def _log(record: dict[str, Any]) -> None:
        log(tag, name, step=record["step"], loss=record["train_loss"], val_acc=record["val_acc"])

    return _log


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    out = stage_dir(out_root, STAGE)
    images = load_image_set(out_root)
    ids = list(range(images.labels.shape[0]))
    groups = images.subject_ids if cfg["split"]["subject_level"] else None
    split = split_dataset(ids, cfg.split_seed, groups=groups)
    write_json(out / "split.json", split.to_dict())
    log(TAG, "split", train=len(split.train), val=len(split.val), test=len(split.test), subject_level=split.subject_level)

    tcfg = train_config(cfg, images.labels[split.train])
    spec = net_spec(cfg, images)
    model = ConvClassifier(spec)
    history: dict[str, Any] = {}
    summary: dict[str, Any] = {}
    for side in SIDES:
        X = getattr(images, side)
        train = LabeledData(inputs=(X[split.train],), labels=images.labels[split.train])
        val = LabeledData(inputs=(X[split.val],), labels=images.labels[split.val])
        result = train_with_early_stopping(model, train, val, tcfg, on_step=step_logger(TAG, side))
        save_checkpoint(
            out / side / "model.scwt",
            result.params,
            {
                "spec": spec.to_dict(),
                "step": result.best_step,
                "stopped_step": result.stopped_step,
                "best_val_acc": result.best_val_acc,
                "class_weights": list(tcfg.class_weights),
            },
        )
        history[side] = result.history
        summary[side] = {"best_step": result.best_step, "best_val_acc": result.best_val_acc}
        log(TAG, f"{side} done", best_step=result.best_step, best_val_acc=result.best_val_acc, stopped=result.stopped_step)
    write_json(out / "history.json", history)
    return {"models": summary, "class_weights": list(tcfg.class_weights)}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
