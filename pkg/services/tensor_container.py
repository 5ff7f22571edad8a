"""Binary tensor container used for every numeric artifact.

Layout (little-endian)::

    magic   4 bytes  b"SCWT"
    version u16      1
    dtype   u8       1 = f32, 2 = f64
    rank    u8
    dims    u32 * rank
    payload row-major values
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from services.errors import FormatError, MissingArtifactError

MAGIC = b"SCWT"
VERSION = 1
DTYPE_TAGS: dict[int, np.dtype] = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_BY_NAME = {"f32": 1, "f64": 2}
_PREFIX = struct.Struct("<4sHBB")
_U32_MAX = 0xFFFFFFFF


def _dtype_tag(dtype: str | np.dtype | None, array: np.ndarray) -> int:
    if dtype is None:
        return 1 if array.dtype == np.float32 else 2
    if isinstance(dtype, str):
        if dtype not in TAG_BY_NAME:
            raise FormatError(f"Unsupported container dtype {dtype!r}", stage="tensor_io")
        return TAG_BY_NAME[dtype]
    return 1 if np.dtype(dtype) == np.float32 else 2


def encode_tensor(array: Any, dtype: str | None = None) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit the container header", stage="tensor_io")
    if any(d > _U32_MAX for d in arr.shape):
        raise FormatError(f"dims {arr.shape} overflow u32", stage="tensor_io")
    tag = _dtype_tag(dtype, arr)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes(order="C")
    header = _PREFIX.pack(MAGIC, VERSION, tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < _PREFIX.size:
        raise FormatError("container shorter than its header", stage="tensor_io")
    magic, version, tag, rank = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", stage="tensor_io")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}", stage="tensor_io")
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}", stage="tensor_io")
    dims_end = _PREFIX.size + 4 * rank
    if len(blob) < dims_end:
        raise FormatError("container truncated inside dims", stage="tensor_io")
    dims = struct.unpack_from(f"<{rank}I", blob, _PREFIX.size)
    dtype = DTYPE_TAGS[tag]
    count = 1
    for d in dims:
        count *= int(d)
    expected = count * dtype.itemsize
    actual = len(blob) - dims_end
    if actual != expected:
        raise FormatError(
            f"payload length {actual} does not match dims {dims} ({expected} bytes)",
            stage="tensor_io",
            details={"dims": list(dims), "expected": expected, "actual": actual},
        )
    # copy so the array owns writable memory
    return np.frombuffer(blob, dtype=dtype, count=count, offset=dims_end).reshape(dims).copy()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except Exception:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_tensor(path: str | Path, array: Any, dtype: str | None = None) -> Path:
    p = Path(path)
    _atomic_write(p, encode_tensor(array, dtype=dtype))
    return p


def read_tensor(path: str | Path, *, rank: int | None = None) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"tensor file not found: {p}", stage="tensor_io")
    arr = decode_tensor(p.read_bytes())
    if rank is not None and arr.ndim != rank:
        raise FormatError(f"{p.name}: expected rank {rank}, header declares {arr.ndim}", stage="tensor_io")
    return arr


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def write_json(path: str | Path, obj: Any) -> Path:
    p = Path(path)
    _atomic_write(p, dumps_json(obj).encode("utf-8"))
    return p


class ArtifactDoc(dict):
    """JSON object read from an artifact; a missing key is a FormatError naming the file."""

    source = ""

    def __missing__(self, key: Any) -> Any:
        raise FormatError(f"{self.source}: missing key {key!r}", stage="artifacts", details={"key": str(key)})


def read_json(path: str | Path) -> Any:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"JSON artifact not found: {p}", stage="artifacts")

    def _doc(obj: dict[str, Any]) -> ArtifactDoc:
        doc = ArtifactDoc(obj)
        doc.source = p.name
        return doc

    try:
        return json.loads(p.read_text(encoding="utf-8"), object_hook=_doc)
    except json.JSONDecodeError as e:
        raise FormatError(f"{p.name}: invalid JSON ({e})", stage="artifacts") from e


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")
