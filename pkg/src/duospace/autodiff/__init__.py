"""Reverse-mode automatic differentiation over NumPy arrays."""
from . import functional
from .checkpoint import CheckpointError, CheckpointVersionError, load_arrays, save_arrays
from .conv import conv2d, conv3d, conv_transpose2d
from .gradcheck import REGISTRY, GradCheckReport, grad_check, register, run_suite
from .nn import (MLP, Conv2d, Conv3d, ConvTranspose2d, LayerNorm, Linear, Module, ModuleList,
                 Parameter)
from .sampling import grid_sample
from .tensor import (NonFiniteError, ShapeError, Tensor, as_tensor, backward, clear_tape,
                     get_default_dtype, is_grad_enabled, no_grad, precision, set_default_dtype,
                     strict_mode, tape_length)

__all__ = [
    "functional", "Tensor", "Parameter", "Module", "ModuleList", "Linear", "Conv2d", "Conv3d",
    "ConvTranspose2d", "LayerNorm", "MLP", "backward", "no_grad", "is_grad_enabled", "precision",
    "strict_mode", "tape_length", "clear_tape", "as_tensor", "get_default_dtype",
    "set_default_dtype", "ShapeError", "NonFiniteError", "conv2d", "conv3d", "conv_transpose2d",
    "grid_sample", "grad_check", "run_suite", "register", "REGISTRY", "GradCheckReport",
    "save_arrays", "load_arrays", "CheckpointError", "CheckpointVersionError",
]
