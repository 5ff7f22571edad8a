from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

from step7_train import load_image_set, load_split, net_spec, step_logger, train_config
from step_common import run_step_main

from services.artifacts import log, stage_dir
from services.config import PipelineConfig
from services.fusion import FusionNetwork
from services.neural import LabeledData, save_checkpoint, train_with_early_stopping
from services.tensor_container import write_json

STAGE = "fuse"
TAG = "FUSE"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    out = stage_dir(out_root, STAGE)
    images = load_image_set(out_root)
    split = load_split(out_root)
    spec = net_spec(cfg, images)
    tcfg = train_config(cfg, images.labels[split.train])
    train = LabeledData(inputs=(images.left[split.train], images.right[split.train]), labels=images.labels[split.train])
    val = LabeledData(inputs=(images.left[split.val], images.right[split.val]), labels=images.labels[split.val])

    history: dict[str, Any] = {}
    summary: dict[str, Any] = {}
    for kind in cfg["fusion"]["latent_heads"]:
        # towers start fresh; nothing is carried over from the solo classifiers
        model = FusionNetwork(spec, kind)
        result = train_with_early_stopping(model, train, val, tcfg, on_step=step_logger(TAG, kind))
        save_checkpoint(
            out / kind / "model.scwt",
            result.params,
            {
                "spec": spec.to_dict(),
                "kind": kind,
                "fused_dim": model.fused_dim,
                "step": result.best_step,
                "stopped_step": result.stopped_step,
                "best_val_acc": result.best_val_acc,
            },
        )
        history[kind] = result.history
        summary[kind] = {"best_step": result.best_step, "best_val_acc": result.best_val_acc}
        log(TAG, f"{kind} done", fused_dim=model.fused_dim, best_step=result.best_step, best_val_acc=result.best_val_acc)
    write_json(out / "history.json", history)
    return {"heads": summary}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
