# scripts/orchestrator.py
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List

from step_common import add_common_args, config_from_args, error_payload, print_error

import step1_simulate
import step2_preprocess
import step3_localize
import step4_scout
import step5_epoch
import step6_cwt
import step7_train
import step8_fuse
import step9_evaluate
import step10_report
from services.artifacts import emit_result, log
from services.config import PipelineConfig, result_markers_enabled
from services.errors import ScwtError, exit_code_for

StageFn = Callable[[PipelineConfig, Path], Dict[str, Any]]

STAGES: Dict[str, StageFn] = {
    "simulate": step1_simulate.run,
    "preprocess": step2_preprocess.run,
    "localize": step3_localize.run,
    "scout": step4_scout.run,
    "epoch": step5_epoch.run,
    "cwt": step6_cwt.run,
    "train": step7_train.run,
    "fuse": step8_fuse.run,
    "evaluate": step9_evaluate.run,
    "report": step10_report.run,
}


class StepError(RuntimeError):
    def __init__(self, step: str, reason: str, *, exit_code: int = 1, error_type: str = "ScwtError"):
        super().__init__(f"{step}: {reason}")
        self.step = step
        self.reason = reason
        self.exit_code = exit_code
        self.error_type = error_type


def stages_for(cmd: str) -> List[str]:
    if cmd == "all":
        return list(STAGES)
    if cmd not in STAGES:
        raise StepError("cli", f"unknown subcommand {cmd!r}", exit_code=1, error_type="ValidationError")
    return [cmd]


def run_pipeline(cmd: str, cfg: PipelineConfig, out_root: Path) -> Dict[str, Any]:
    """Run one stage (or all of them in order); raises StepError carrying the exit code on failure."""
    results: Dict[str, Any] = {}
    for stage in stages_for(cmd):
        t0 = time.monotonic()
        log("ORCH", "stage start", stage=stage, out=out_root)
        try:
            results[stage] = STAGES[stage](cfg, Path(out_root))
        except ScwtError as e:
            raise StepError(stage, str(e), exit_code=exit_code_for(e), error_type=type(e).__name__) from e
        log("ORCH", "stage done", stage=stage, seconds=round(time.monotonic() - t0, 2))
    return results


def main(argv: List[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description="Subcortical scalogram pipeline")
    ap.add_argument("cmd", choices=[*STAGES, "all"], help="Stage to run, or 'all'")
    add_common_args(ap)
    args = ap.parse_args(argv)

    try:
        cfg, out_root = config_from_args(args)
    except ScwtError as e:
        code = exit_code_for(e)
        print_error(error_payload("config", e, code))
        return code

    log("ORCH", "start", cmd=args.cmd, seed=cfg.seed, fusion=cfg["fusion"]["strategy"], config_hash=cfg.hash())
    try:
        results = run_pipeline(args.cmd, cfg, out_root)
    except StepError as e:
        print_error(
            {
                "ok": False,
                "stage": e.step,
                "error_type": e.error_type,
                "error": e.reason,
                "exit_code": e.exit_code,
            }
        )
        return e.exit_code

    if result_markers_enabled():
        emit_result({"ok": True, "cmd": args.cmd, "config_hash": cfg.hash(), "stages": results})
    return 0


if __name__ == "__main__":
    sys.exit(main())
