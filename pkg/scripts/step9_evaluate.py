from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

import numpy as np
from step7_train import load_image_set, load_split
from step_common import run_step_main

from services.artifacts import log, require, stage_dir, warn
from services.config import PipelineConfig
from services.evaluation import metrics_report
from services.fusion import LATENT_STRATEGIES, FusionNetwork, argmax_lowest, fuse_posteriors, strategy_accuracies
from services.neural import ConvNetSpec, load_checkpoint, predict_proba
from services.tensor_container import write_json

STAGE = "evaluate"
TAG = "EVALUATE"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    out = stage_dir(out_root, STAGE)
    root = Path(out_root)
    images = load_image_set(root)
    split = load_split(root)
    test = np.asarray(split.test, dtype=np.int64)
    y = images.labels[test]

    posteriors = {}
    for side in ("left", "right"):
        params, _meta = load_checkpoint(require(root / "train" / side / "model.scwt", f"{side} classifier"))
        posteriors[side] = predict_proba(params, getattr(images, side)[test])

    latent_probs: dict[str, np.ndarray] = {}
    for kind in LATENT_STRATEGIES:
        path = root / "fuse" / kind / "model.scwt"
        if not path.exists():
            continue
        params, meta = load_checkpoint(path)
        net = FusionNetwork(ConvNetSpec.from_dict(meta["spec"]), kind)
        latent_probs[kind] = net.predict(params, (images.left[test], images.right[test]))

    strategy = cfg["fusion"]["strategy"]
    if strategy in LATENT_STRATEGIES:
        if strategy not in latent_probs:
            require(root / "fuse" / strategy / "model.scwt", f"{strategy} fusion model")
        scores = latent_probs[strategy]
        preds = argmax_lowest(scores)
    else:
        preds, scores = fuse_posteriors(strategy, posteriors["left"], posteriors["right"])

    accuracies = strategy_accuracies(posteriors["left"], posteriors["right"], y, latent_probs)
    if accuracies["product"] < max(accuracies["left"], accuracies["right"]) - 0.01:
        warn(TAG, "product fusion trails the best single hemisphere", **accuracies)

    report = metrics_report(preds, scores, y)
    write_json(
        out / "predictions.json",
        {
            "strategy": strategy,
            "ids": split.test,
            "labels": y.tolist(),
            "preds": preds.tolist(),
            "scores": scores.tolist(),
        },
    )
    write_json(out / "metrics.json", {"strategy": strategy, **report.to_dict()})
    write_json(out / "strategies.json", accuracies)
    log(TAG, "metrics", strategy=strategy, accuracy=report.accuracy, auc_macro=report.auc_macro, ap_macro=report.ap_macro)
    return {
        "strategy": strategy,
        "accuracy": report.accuracy,
        "auc_macro": report.auc_macro,
        "ap_macro": report.ap_macro,
        "strategies": accuracies,
    }


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
