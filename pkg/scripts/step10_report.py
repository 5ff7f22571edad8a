from __future__ import annotations

import sys
from pathlib import Path
from typing import Any

from step_common import run_step_main

from services.artifacts import log, require, stage_dir
from services.config import PipelineConfig
from services.evaluation import MetricsReport, export_curves_csv, strategies_frame
from services.tensor_container import read_json, write_json

STAGE = "report"
TAG = "REPORT"


def run(cfg: PipelineConfig, out_root: Path) -> dict[str, Any]:
    out = stage_dir(out_root, STAGE)
    eval_dir = Path(out_root) / "evaluate"
    doc = read_json(require(eval_dir / "metrics.json", "metrics"))
    accuracies = read_json(require(eval_dir / "strategies.json", "strategy accuracies"))

    report = MetricsReport.from_dict(doc)
    written = export_curves_csv(report, out)
    strategies_frame(accuracies).to_csv(out / "strategies.csv", index=False, float_format="%.10g", lineterminator="\n")
    write_json(
        out / "metrics_report.json",
        {"strategy": doc.get("strategy"), "config_hash": cfg.hash(), **report.to_dict()},
    )
    log(TAG, "written", csv=len(written) + 1, accuracy=report.accuracy, auc_macro=report.auc_macro)
    return {
        "accuracy": report.accuracy,
        "auc_macro": report.auc_macro,
        "ap_macro": report.ap_macro,
        "files": sorted(p.name for p in written) + ["metrics_report.json", "strategies.csv"],
    }


def main() -> int:
    return run_step_main(STAGE, run)


if __name__ == "__main__":
    sys.exit(main())
