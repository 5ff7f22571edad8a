from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

from step_common import run_step_main

from services.artifacts import log, stage_dir
from services.config import PipelineConfig
from services.forward import (
    HeadGeometry,
    build_spherical_lead_field,
    default_geometry,
    geometry_from_dict,
    geometry_to_dict,
    save_lead_field,
    save_recording,
)
from services.scout import atlas_to_dict, build_subatlas, default_region_spec
from services.synthgen import CohortConfig, cohort_frame, generate_cohort
from services.tensor_container import sidecar_path, write_json

STAGE = "simulate"
TAG = "SIMULATE"


def resolve_geometry(cfg: PipelineConfig) -> HeadGeometry:
    g = cfg["geometry"]
    if g["electrode_positions"] is not None or g["source_positions"] is not None:
        return geometry_from_dict(g)
    return default_geometry(
        n_electrodes=int(g["n_electrodes"]),
        n_background=int(g["n_background"]),
        sources_per_region=int(g["sources_per_region"]),
        seed=cfg.seed,
        sphere_radius=float(g["sphere_radius"]),
        conductivity=float(g["conductivity"]),
        region_spec=cfg["atlas"]["regions"],
    )


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    out = stage_dir(out_root, STAGE)
    geometry = resolve_geometry(cfg)
    lf = build_spherical_lead_field(geometry, order=int(cfg["geometry"]["series_order"]))
    log(TAG, "lead field", electrodes=lf.n_channels, sources=lf.n_sources, order=cfg["geometry"]["series_order"])

    lf_path = save_lead_field(out / "leadfield.scwt", lf)
    write_json(sidecar_path(lf_path), geometry_to_dict(geometry))

    regions = cfg["atlas"]["regions"] or default_region_spec()
    atlas = build_subatlas(geometry.source_positions, regions)
    write_json(out / "atlas.json", {**atlas_to_dict(atlas), "region_spec": regions})
    log(TAG, "atlas", sizes=",".join(str(len(r)) for r in atlas.regions))

    cohort_cfg = CohortConfig.from_config(cfg["cohort"], cfg.seed)
    recordings = generate_cohort(cohort_cfg, lf, atlas)
    rec_dir = out / "recordings"
    for rec in recordings:
        save_recording(rec_dir / f"{rec.subject_id}.scwt", rec)

    frame = cohort_frame(recordings, cohort_cfg, cfg.hash())
    frame.to_csv(out / "cohort.csv", index=False, lineterminator="\n")
    manifest = {
        "config_hash": cfg.hash(),
        "n_electrodes": lf.n_channels,
        "n_sources": lf.n_sources,
        "sampling_rate": cohort_cfg.sampling_rate,
        "subjects": [
            {"subject_id": rec.subject_id, "label": int(rec.label), "seed": cohort_cfg.seed + k}
            for k, rec in enumerate(recordings)
        ],
    }
    write_json(out / "manifest.json", manifest)
    log(TAG, "cohort", subjects=len(recordings), samples=cohort_cfg.n_samples, rate=cohort_cfg.sampling_rate)
    return {"subjects": len(recordings), "n_sources": lf.n_sources, "n_electrodes": lf.n_channels}


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
