"""On-disk scene layout: ``manifest.json`` plus raw little-endian float32 blobs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..geometry import EgoWarp
from .sim import Frame, Scene, SceneSpec

FORMAT = "duospace-scene"
VERSION = 1

__all__ = ["DatasetError", "MissingManifestError", "MalformedManifestError", "ShapeMismatchError",
           "TruncatedBlobError", "write_dataset", "read_dataset", "write_scenes", "read_scenes"]


class DatasetError(RuntimeError):
    pass


class MissingManifestError(DatasetError):
    pass


class MalformedManifestError(DatasetError):
    pass


class ShapeMismatchError(DatasetError):
    pass


class TruncatedBlobError(DatasetError):
    pass


def _write_blob(directory: Path, name: str, arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4")
    raw = data.tobytes()
    (directory / name).write_bytes(raw)
    return {"file": name, "shape": list(arr.shape), "dtype": "<f4", "nbytes": len(raw)}


def _read_blob(directory: Path, entry: dict) -> np.ndarray:
    try:
        name, shape, dtype, nbytes = entry["file"], entry["shape"], entry["dtype"], entry["nbytes"]
    except (KeyError, TypeError) as exc:
        raise MalformedManifestError(f"blob entry missing field {exc}") from None
    dt = np.dtype(dtype)
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if expected != nbytes:
        raise ShapeMismatchError(
            f"{name}: declared shape {shape} needs {expected} bytes but manifest records {nbytes}")
    path = directory / name
    if not path.is_file():
        raise TruncatedBlobError(f"{name}: blob file missing")
    raw = path.read_bytes()
    if len(raw) < nbytes:
        raise TruncatedBlobError(f"{name}: blob has {len(raw)} bytes, expected {nbytes}")
    if len(raw) > nbytes:
        raise ShapeMismatchError(f"{name}: blob has {len(raw)} bytes, shape {shape} needs {nbytes}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float32)


def write_dataset(scene: Scene, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, fr in enumerate(scene.frames):
        gt_name = f"frame_{i:04d}_gt.json"
        (directory / gt_name).write_text(json.dumps({
            "poses": fr.gt_poses.tolist(),
            "classes": fr.gt_classes.tolist(),
            "track_ids": fr.track_ids.tolist(),
        }))
        frames.append({
            "index": i,
            "timestamp": fr.timestamp,
            "ego_warp_to_prev": fr.ego_warp_to_prev.to_dict(),
            "images": _write_blob(directory, f"frame_{i:04d}_images.bin", fr.images),
            "masks": _write_blob(directory, f"frame_{i:04d}_masks.bin", fr.map_masks),
            "gt": gt_name,
        })
    manifest = {"format": FORMAT, "version": VERSION, "spec": scene.spec.to_dict(),
                "rig": scene.rig.to_dict(), "frames": frames}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def read_dataset(directory) -> Scene:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise MissingManifestError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedManifestError(f"{path}: {exc}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise MalformedManifestError(f"{path}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise MalformedManifestError(f"{path}: unsupported version {manifest.get('version')}")
    try:
        spec_d = dict(manifest["spec"])
        spec_d["rig"] = manifest["rig"]
        spec = SceneSpec.from_dict(spec_d)
        entries = manifest["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedManifestError(f"{path}: bad spec or frame list ({exc})") from None
    frames = []
    for e in entries:
        try:
            gt = json.loads((directory / e["gt"]).read_text())
            warp = EgoWarp.from_dict(e["ego_warp_to_prev"])
            ts = float(e["timestamp"])
        except (KeyError, TypeError, ValueError, FileNotFoundError) as exc:
            raise MalformedManifestError(f"{path}: bad frame entry ({exc})") from None
        poses = np.array(gt["poses"], dtype=np.float64).reshape(-1, 10)
        frames.append(Frame(
            images=_read_blob(directory, e["images"]),
            gt_poses=poses,
            gt_classes=np.array(gt["classes"], dtype=np.int64),
            ego_warp_to_prev=warp,
            timestamp=ts,
            map_masks=_read_blob(directory, e["masks"]),
            track_ids=np.array(gt.get("track_ids", []), dtype=np.int64),
        ))
    return Scene(spec, frames)


def write_scenes(scenes, directory, split: dict | None = None) -> Path:
    """Write several scenes as ``scene_XXXX`` subdirectories plus a ``dataset.json`` index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, sc in enumerate(scenes):
        name = f"scene_{i:04d}"
        write_dataset(sc, directory / name)
        names.append(name)
    split = split or {"train": names, "val": []}
    (directory / "dataset.json").write_text(json.dumps({"format": FORMAT + "-set", "version": VERSION,
                                                         "scenes": names, "split": split}, indent=1))
    return directory


def read_scenes(directory, split: str | None = None) -> list:
    directory = Path(directory)
    index = directory / "dataset.json"
    if not index.is_file():
        if (directory / "manifest.json").is_file():
            return [read_dataset(directory)]
        raise MissingManifestError(f"no dataset.json or manifest.json in {directory}")
    try:
        meta = json.loads(index.read_text())
        names = meta["split"][split] if split else meta["scenes"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedManifestError(f"{index}: {exc}") from None
    return [read_dataset(directory / n) for n in names]
