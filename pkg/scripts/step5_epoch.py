from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

import numpy as np
from step_common import load_subjects, run_step_main

from services.artifacts import log, require, stage_dir, warn
from services.config import PipelineConfig
from services.errors import ValidationError
from services.neural import CLASS_NAMES
from services.preprocess import EPOCH_SAMPLES, segment_epochs
from services.scout import ScoutMatrix
from services.tensor_container import read_json, read_tensor, sidecar_path, write_json, write_tensor

STAGE = "epoch"
TAG = "EPOCH"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    out = stage_dir(out_root, STAGE)
    src = Path(out_root) / "scout" / "series"
    samples: list[np.ndarray] = []
    labels: list[int] = []
    subject_ids: list[str] = []
    for entry in load_subjects(out_root):
        sid = entry["subject_id"]
        path = require(src / f"{sid}.scwt", f"scout series {sid}")
        meta = read_json(sidecar_path(path))
        sm = ScoutMatrix(series=read_tensor(path, rank=2), sampling_rate=float(meta["sampling_rate"]))
        epochs = segment_epochs(sm, EPOCH_SAMPLES, subject_id=sid, label=int(entry["label"]))
        if not epochs:
            warn(TAG, "no full epoch", subject=sid, samples=sm.series.shape[1])
        for e in epochs:
            samples.append(e.samples)
            labels.append(e.label)
            subject_ids.append(e.subject_id)
    if not samples:
        raise ValidationError("no epochs produced; recordings are shorter than one epoch", stage=STAGE)

    batch = np.stack(samples, axis=0)
    write_tensor(out / "epochs.scwt", batch, dtype="f64")
    counts = [labels.count(c) for c in range(len(CLASS_NAMES))]
    write_json(
        out / "epochs.json",
        {
            "ids": list(range(len(labels))),
            "labels": labels,
            "subject_ids": subject_ids,
            "class_counts": dict(zip(CLASS_NAMES, counts)),
            "epoch_samples": EPOCH_SAMPLES,
        },
    )
    log(TAG, "epochs", total=len(labels), **dict(zip(CLASS_NAMES, counts)))
    return {"epochs": len(labels), "class_counts": counts}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
