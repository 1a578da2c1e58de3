from .gradcheck import GradCheckReport, grad_check, relative_error
from .ops import (BN_EPS, BN_MOMENTUM, LayerParams, add_residual, batch_norm, concat_channels,
                  conv2d, relu)
from .optim import Adam, AdamState, adam_step
from .serialization import load_arrays, save_arrays
from .tensor import Tensor, as_tensor

__all__ = [
    "Adam", "AdamState", "BN_EPS", "BN_MOMENTUM", "GradCheckReport", "LayerParams", "Tensor",
    "adam_step", "add_residual", "as_tensor", "batch_norm", "concat_channels", "conv2d",
    "grad_check", "load_arrays", "relative_error", "relu", "save_arrays",
]
