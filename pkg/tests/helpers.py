"""Small configurations shared by the slower integration tests."""
import copy

from duospace.config import config_from_dict

TINY = {
    "seed": 0,
    "data": {"num_scenes": 2, "val_scenes": 1, "num_frames": 2, "num_objects": 2},
    "rig": {"num_cameras": 2, "image_size": [64, 48]},
    "grid": {"resolution": [8, 8, 2]},
    "encoder": {"stage_channels": [4, 4, 8, 8], "out_channels": 8},
    "decoder": {"num_queries": 6, "d_model": 8, "heads": 2, "points": 2},
    "seg": {"width": 4},
    "training": {"epochs": 1, "max_steps": 3, "lr_backbone": 1e-3, "lr_other": 1e-3},
}


def merge(a, b):
    for k, v in b.items():
        if isinstance(v, dict):
            merge(a.setdefault(k, {}), v)
        else:
            a[k] = v
    return a


def tiny_dict(**overrides):
    return merge(copy.deepcopy(TINY), overrides)


def tiny_config(**overrides):
    return config_from_dict(tiny_dict(**overrides))
