"""Conditional-normalization cross-modality segmentation on a numpy autodiff core."""

from .models import ModelConfig, build_model, make_unconditional, param_count
from .tensor import Tensor, no_grad, precision, set_precision

__version__ = "0.1.0"

__all__ = ["ModelConfig", "Tensor", "build_model", "make_unconditional", "no_grad", "param_count", "precision",
           "set_precision"]
