"""Synthetic multi-camera scenes and their on-disk format."""
from .io import (DatasetError, MalformedManifestError, MissingManifestError, ShapeMismatchError,
                 TruncatedBlobError, read_dataset, read_scenes, write_dataset, write_scenes)
from .sim import (DRIVABLE, LANE, Frame, ObjectClass, Scene, SceneSpec, SceneSpecError,
                  default_classes, generate)

__all__ = ["Frame", "ObjectClass", "Scene", "SceneSpec", "SceneSpecError", "generate",
           "default_classes", "DRIVABLE", "LANE", "write_dataset", "read_dataset", "write_scenes",
           "read_scenes", "DatasetError", "MissingManifestError", "MalformedManifestError",
           "ShapeMismatchError", "TruncatedBlobError"]
