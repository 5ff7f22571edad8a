from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

from step_common import load_subjects, run_step_main

from services.artifacts import log, require, stage_dir
from services.config import PipelineConfig
from services.forward import load_recording, save_recording
from services.preprocess import preprocess_recording
from services.tensor_container import write_json

STAGE = "preprocess"
TAG = "PREPROCESS"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    p = cfg["preprocess"]
    src = Path(out_root) / "simulate" / "recordings"
    out = stage_dir(out_root, STAGE)
    subjects = load_subjects(out_root)
    rate = None
    n_samples = None
    for entry in subjects:
        sid = entry["subject_id"]
        rec = load_recording(require(src / f"{sid}.scwt", f"recording {sid}"))
        clean = preprocess_recording(
            rec,
            preset=p["preset"],
            low=float(p["low_hz"]),
            high=float(p["high_hz"]),
            target_rate=float(p["target_rate"]),
        )
        save_recording(out / "recordings" / f"{sid}.scwt", clean)
        rate = clean.sampling_rate
        n_samples = clean.n_samples
    write_json(
        out / "manifest.json",
        {"preset": p["preset"], "band_hz": [p["low_hz"], p["high_hz"]], "sampling_rate": rate, "subjects": subjects},
    )
    log(TAG, "done", subjects=len(subjects), preset=p["preset"], rate=rate, samples=n_samples)
    return {"subjects": len(subjects), "sampling_rate": rate, "preset": p["preset"]}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
