"""Masked-frames video depth estimation on a from-scratch numpy autograd."""

from .autograd import Tensor, backward, no_grad
from .errors import ConfigError, DataError, DomainError, FMNetError, ShapeError
from .masking import MaskPlan, identity_plan, random_mask_plan, uniform_mask_plan
from .model import FMNet, FMNetConfig, FrameSequence, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "backward", "no_grad",
    "FMNetError", "ShapeError", "DomainError", "ConfigError", "DataError",
    "MaskPlan", "identity_plan", "random_mask_plan", "uniform_mask_plan",
    "FMNet", "FMNetConfig", "FrameSequence", "build_model", "load_checkpoint", "save_checkpoint",
]
