"""Checkpoint format: ``manifest.json`` + ``params.bin``.

The blob is a concatenation of little-endian float32 arrays.  The manifest
lists each array's name, shape and byte offset, groups arrays into sections
(``backbone``, ``general``, ``dsn.<domain>``) and stores a sha256 per section
so single sections can be compared or loaded on their own.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

MANIFEST = "manifest.json"
BLOB = "params.bin"
_LE_F32 = np.dtype("<f4")


def section_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head == "dsns":
        return "dsn." + name.split(".", 2)[1]
    return head


def group_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=_LE_F32).tobytes() for a in arrays.values())


def checksum(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k, a in arrays.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
    return h.hexdigest()


def save(path: str | Path, params: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> dict:
    """Write a checkpoint directory; returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, sections = [], {}
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in params.items():
            raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            sections.setdefault(section_of(name), {})[name] = arr
            offset += len(raw)
    manifest = {
        "format": "mdctr-ckpt/1",
        "dtype": "float32-le",
        "tensors": entries,
        "checksums": {s: checksum(a) for s, a in sections.items()},
        "meta": meta or {},
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / MANIFEST).read_text())


def load(path: str | Path, sections: list[str] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays (optionally only some sections) and the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    known = {section_of(e["name"]) for e in manifest["tensors"]}
    if sections is not None:
        unknown = set(sections) - known
        if unknown:
            raise KeyError(f"checkpoint has no section(s) {sorted(unknown)}; available: {sorted(known)}")
    out = {}
    for e in manifest["tensors"]:
        if sections is not None and section_of(e["name"]) not in sections:
            continue
        arr = np.frombuffer(blob, dtype=_LE_F32, count=int(np.prod(e["shape"])), offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return out, manifest
