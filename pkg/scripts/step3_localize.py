from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

from step_common import load_subjects, run_step_main

from services.artifacts import log, require, stage_dir
from services.config import PipelineConfig
from services.forward import load_lead_field, load_recording, reference_lead_field, save_lead_field
from services.inverse import apply_inverse, build_kernel, save_kernel
from services.tensor_container import sidecar_path, write_json, write_tensor

STAGE = "localize"
TAG = "LOCALIZE"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    inv = cfg["inverse"]
    out = stage_dir(out_root, STAGE)
    lf = load_lead_field(require(Path(out_root) / "simulate" / "leadfield.scwt", "lead field"))
    # preprocessed recordings are average-referenced, so the gain must be too
    lf_ref = reference_lead_field(lf)
    save_lead_field(out / "leadfield_ref.scwt", lf_ref)

    kernel = build_kernel(
        lf_ref,
        lam=inv["lambda"],
        snr=inv["snr"],
        standardized=bool(inv["standardized"]),
    )
    save_kernel(out / "kernel.scwt", kernel)
    log(TAG, "kernel", **{"lambda": kernel.lam}, standardized=kernel.standardized, sources=lf.n_sources)

    src = Path(out_root) / "preprocess" / "recordings"
    subjects = load_subjects(out_root)
    for entry in subjects:
        sid = entry["subject_id"]
        rec = load_recording(require(src / f"{sid}.scwt", f"preprocessed recording {sid}"))
        est = apply_inverse(kernel, rec)
        path = write_tensor(out / "sources" / f"{sid}.scwt", est.currents, dtype="f64")
        write_json(sidecar_path(path), {"sampling_rate": est.sampling_rate, "subject_id": sid, "label": entry["label"]})
    write_json(
        out / "manifest.json",
        {"lambda": kernel.lam, "standardized": kernel.standardized, "subjects": subjects},
    )
    log(TAG, "sources", subjects=len(subjects))
    return {"subjects": len(subjects), "lambda": kernel.lam, "standardized": kernel.standardized}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
