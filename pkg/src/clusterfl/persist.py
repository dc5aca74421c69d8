"""JSON manifest + little-endian float32 sidecar persistence.

All array artifacts are written as ``<stem>.json`` (metadata) next to
``<stem>.f32`` (raw ``<f4`` values, C order).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError


def _stem(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".f32") else path


def dump_json(obj: Any, path: str | Path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_array(path: str | Path, values: np.ndarray, meta: dict) -> Path:
    """Write ``values`` as float32 sidecar plus ``meta`` manifest; returns the manifest path."""
    stem = _stem(path)
    arr = np.ascontiguousarray(values, dtype="<f4")
    stem.with_suffix(".f32").write_bytes(arr.tobytes())
    manifest = dict(meta)
    manifest["shape"] = list(arr.shape)
    manifest["sidecar"] = stem.with_suffix(".f32").name
    dump_json(manifest, stem.with_suffix(".json"))
    return stem.with_suffix(".json")


def load_array(path: str | Path) -> tuple[np.ndarray, dict]:
    stem = _stem(path)
    meta = load_json(stem.with_suffix(".json"))
    raw = (stem.parent / meta["sidecar"]).read_bytes()
    shape = tuple(meta["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(raw) != expected:
        raise FormatError(f"{meta['sidecar']}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return values, meta
