"""Shared CLI plumbing for the pipeline step scripts."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from services.artifacts import emit_result  # noqa: E402
from services.config import PipelineConfig, default_out_dir, load_config, result_markers_enabled  # noqa: E402
from services.errors import ScwtError, exit_code_for  # noqa: E402

StepFn = Callable[[PipelineConfig, Path], dict[str, Any]]


def add_common_args(ap: argparse.ArgumentParser) -> argparse.ArgumentParser:
    ap.add_argument("--config", default=None, help="Pipeline JSON config (defaults apply when omitted)")
    ap.add_argument("--seed", type=int, default=None, help="Master seed; overrides config and SCWT_SEED")
    ap.add_argument("--fusion", default=None, help="Fusion strategy: left|right|sum|product|early|tfn")
    ap.add_argument("--out", default=None, help="Output root (default: SCWT_OUT_DIR or runs/latest)")
    ap.add_argument("--subject-level-split", action="store_true", help="Keep each subject inside one split")
    return ap


def config_from_args(args: argparse.Namespace) -> tuple[PipelineConfig, Path]:
    cfg = load_config(
        args.config,
        seed=args.seed,
        fusion=args.fusion,
        subject_level_split=bool(args.subject_level_split),
    )
    out_root = Path(args.out) if args.out else default_out_dir()
    return cfg, out_root


def error_payload(stage: str, exc: BaseException, exit_code: int) -> dict[str, Any]:
    return {
        "ok": False,
        "stage": stage,
        "error_type": type(exc).__name__,
        "error": str(exc),
        "exit_code": exit_code,
    }


def print_error(payload: dict[str, Any]) -> None:
    print(json.dumps(payload, ensure_ascii=False, sort_keys=True), file=sys.stderr, flush=True)


def run_step_main(stage: str, fn: StepFn, argv: list[str] | None = None) -> int:
    """Standalone entry point for one step: parse flags, run, print the result marker or error JSON."""
    ap = add_common_args(argparse.ArgumentParser(description=f"pipeline stage: {stage}"))
    args = ap.parse_args(argv)
    try:
        cfg, out_root = config_from_args(args)
    except ScwtError as e:
        code = exit_code_for(e)
        print_error(error_payload("config", e, code))
        return code
    try:
        result = fn(cfg, out_root)
    except ScwtError as e:
        code = exit_code_for(e)
        print_error(error_payload(stage, e, code))
        return code
    if result_markers_enabled():
        emit_result({"ok": True, "stage": stage, **result})
    return 0


def load_subjects(out_root: Path) -> list[dict[str, Any]]:
    """Subject table written by the simulate stage."""
    from services.artifacts import require
    from services.tensor_container import read_json

    manifest = read_json(require(Path(out_root) / "simulate" / "manifest.json", "simulate manifest"))
    return list(manifest["subjects"])
