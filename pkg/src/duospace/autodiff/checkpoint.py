"""Named-array store: a JSON manifest plus one little-endian raw blob."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "duospace-params"
VERSION = 1

__all__ = ["save_arrays", "load_arrays", "CheckpointError", "CheckpointVersionError", "FORMAT", "VERSION"]


class CheckpointError(RuntimeError):
    """Missing or unreadable checkpoint."""


class CheckpointVersionError(CheckpointError):
    """Manifest written by an incompatible format version."""


def save_arrays(directory, arrays: Mapping[str, np.ndarray], metadata: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` into ``directory`` atomically."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    blob_tmp = directory / "params.bin.tmp"
    with open(blob_tmp, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            entries[name] = {"shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset,
                             "nbytes": len(raw)}
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "blob": "params.bin",
                "metadata": metadata or {}, "tensors": entries}
    man_tmp = directory / "manifest.json.tmp"
    man_tmp.write_text(json.dumps(manifest, indent=1, sort_keys=False))
    os.replace(blob_tmp, directory / "params.bin")
    os.replace(man_tmp, directory / "manifest.json")
    return directory


def load_arrays(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    man_path = directory / "manifest.json"
    if not man_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {man_path}")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint manifest {man_path}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{man_path} is not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {manifest.get('version')} != supported version {VERSION}")
    blob = (directory / manifest["blob"]).read_bytes()
    arrays = {}
    for name, e in manifest["tensors"].items():
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{name}: blob truncated ({len(blob)} < {end} bytes)")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"])
        arrays[name] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return arrays, manifest.get("metadata", {})
