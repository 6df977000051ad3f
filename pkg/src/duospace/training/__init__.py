"""Set matching, detection losses, optimisation and the training loop."""
from .losses import LossConfig, detection_cost, detection_loss, normalize_poses
from .loop import (NumericFailure, Trainer, TrainResult, decode, evaluate_model, load_checkpoint,
                   sample_loss, save_checkpoint)
from .matching import MatchResult, match
from .optim import AdamW, ParamGroup, clip_grad_norm, cosine_lr

__all__ = ["LossConfig", "detection_cost", "detection_loss", "normalize_poses", "NumericFailure",
           "Trainer", "TrainResult", "decode", "evaluate_model", "load_checkpoint", "sample_loss",
           "save_checkpoint", "MatchResult", "match", "AdamW", "ParamGroup", "clip_grad_norm", "cosine_lr"]
