from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path
from typing import Any

from services.errors import MissingArtifactError

RESULT_JSON_PREFIX = "PIPELINE_RESULT_JSON="


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def log(tag: str, message: str, **fields: Any) -> None:
    parts = [f"[{tag}]", message]
    parts.extend(f"{k}={_fmt(v)}" for k, v in fields.items())
    print(" ".join(parts), flush=True)


def warn(tag: str, message: str, **fields: Any) -> None:
    parts = [f"[{tag}][WARN]", message]
    parts.extend(f"{k}={_fmt(v)}" for k, v in fields.items())
    print(" ".join(parts), file=sys.stderr, flush=True)


def emit_result(payload: dict[str, Any]) -> None:
    print(RESULT_JSON_PREFIX + json.dumps(payload, ensure_ascii=False, sort_keys=True), flush=True)


def parse_result_from_stdout(stdout: str, *, prefix: str = RESULT_JSON_PREFIX) -> dict[str, Any]:
    for line in reversed((stdout or "").splitlines()):
        s = line.strip()
        if not s.startswith(prefix):
            continue
        raw = s[len(prefix):].strip()
        if not raw:
            raise ValueError("Result marker found but JSON payload is empty")
        obj = json.loads(raw)
        if not isinstance(obj, dict):
            raise ValueError("Result payload is not a JSON object")
        return obj
    raise ValueError(f"Result marker '{prefix}' not found in stdout")


def config_hash(obj: Any) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def stage_dir(out_root: Path, stage: str, *, create: bool = True) -> Path:
    path = Path(out_root) / stage
    if create:
        path.mkdir(parents=True, exist_ok=True)
    return path


def require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found: {path} (run the previous stage first)", stage="artifacts")
    return Path(path)
