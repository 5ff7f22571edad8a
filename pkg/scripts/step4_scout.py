from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

from step_common import load_subjects, run_step_main

from services.artifacts import log, require, stage_dir
from services.config import PipelineConfig
from services.inverse import SourceEstimate
from services.scout import REGION_NAMES, atlas_from_dict, extract_scout_series
from services.tensor_container import read_json, read_tensor, sidecar_path, write_json, write_tensor

STAGE = "scout"
TAG = "SCOUT"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    out = stage_dir(out_root, STAGE)
    atlas = atlas_from_dict(read_json(require(Path(out_root) / "simulate" / "atlas.json", "atlas")))
    src = Path(out_root) / "localize" / "sources"
    subjects = load_subjects(out_root)
    for entry in subjects:
        sid = entry["subject_id"]
        path = require(src / f"{sid}.scwt", f"source estimate {sid}")
        meta = read_json(sidecar_path(path))
        est = SourceEstimate(currents=read_tensor(path, rank=2), sampling_rate=float(meta["sampling_rate"]))
        sm = extract_scout_series(est, atlas)
        out_path = write_tensor(out / "series" / f"{sid}.scwt", sm.series, dtype="f64")
        write_json(sidecar_path(out_path), {"sampling_rate": sm.sampling_rate, "subject_id": sid, "label": entry["label"]})
    write_json(out / "manifest.json", {"regions": list(REGION_NAMES), "subjects": subjects})
    log(TAG, "series", subjects=len(subjects), regions=len(REGION_NAMES))
    return {"subjects": len(subjects), "regions": list(REGION_NAMES)}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
