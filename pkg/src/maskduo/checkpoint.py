"""Checkpoint archives: named dense arrays plus a JSON header, in one
uncompressed ``.npz`` file.

Layout: every array is stored under its own name; the reserved entry
``__meta__`` holds a UTF-8 JSON object with a format version, a
``kind`` tag, a dtype/shape table for every array, and free-form
provenance fields.  Round-trips are bitwise for the array payloads.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

__all__ = ["save_archive", "load_archive", "FORMAT_VERSION"]


def save_archive(path, arrays: dict[str, np.ndarray], kind: str, extra: dict | None = None) -> Path:
    """Write ``arrays`` and a header to ``path``; returns the path written."""
    path = Path(path)
    if "__meta__" in arrays:
        raise ValueError("'__meta__' is a reserved entry name")
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "entries": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in arrays.items()},
    }
    meta.update(extra or {})
    # asarray with an order, not ascontiguousarray: the latter promotes
    # 0-dim arrays to shape (1,), which would break the header contract
    payload = {k: np.asarray(v, order="C") for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
    except OSError as exc:
        raise OSError(f"failed to write checkpoint archive {path}: {exc}") from exc
    return path


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive back as ``(arrays, meta)``.

    Verifies the header is present and that every array matches its
    declared dtype/shape.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"failed to read checkpoint archive {path}: {exc}") from exc
    with np.load(io.BytesIO(raw)) as npz:
        if "__meta__" not in npz:
            raise ValueError(f"{path} is not a checkpoint archive (missing __meta__)")
        meta = json.loads(bytes(npz["__meta__"]).decode("utf-8"))
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    declared = meta.get("entries", {})
    for name, arr in arrays.items():
        spec = declared.get(name)
        if spec is None:
            raise ValueError(f"{path}: array {name!r} missing from header")
        if str(arr.dtype) != spec["dtype"] or list(arr.shape) != spec["shape"]:
            raise ValueError(
                f"{path}: array {name!r} is {arr.dtype}{arr.shape}, header says "
                f"{spec['dtype']}{tuple(spec['shape'])}"
            )
    return arrays, meta
