from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

from step_common import run_step_main

from services.artifacts import log, require, stage_dir
from services.config import PipelineConfig
from services.preprocess import EPOCH_RATE
from services.tensor_container import read_json, read_tensor, write_json, write_tensor
from services.tfr import default_wavelet_params, epochs_to_image_batches, pseudo_frequencies

STAGE = "cwt"
TAG = "CWT"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    w = cfg["wavelet"]
    out = stage_dir(out_root, STAGE)
    epoch_dir = Path(out_root) / "epoch"
    samples = read_tensor(require(epoch_dir / "epochs.scwt", "epoch batch"), rank=3)
    index = read_json(require(epoch_dir / "epochs.json", "epoch index"))

    params = default_wavelet_params(
        sampling_rate=EPOCH_RATE,
        omega0=float(w["omega0"]),
        f_min=float(w["f_min"]),
        f_max=float(w["f_max"]),
    )
    left, right = epochs_to_image_batches(samples, params)
    # f32 is enough for [0, 1] images
    write_tensor(out / "left.scwt", left, dtype="f32")
    write_tensor(out / "right.scwt", right, dtype="f32")
    write_json(
        out / "index.json",
        {
            "ids": index["ids"],
            "labels": index["labels"],
            "subject_ids": index["subject_ids"],
            "omega0": params.omega0,
            "pseudo_frequencies_hz": pseudo_frequencies(params).tolist(),
            "layout": "epoch x scale x time x channel",
        },
    )
    log(TAG, "scalograms", epochs=left.shape[0], shape="x".join(str(d) for d in left.shape[1:]))
    return {"epochs": int(left.shape[0]), "image_shape": list(left.shape[1:])}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
