"""Multi-scale attention fusion for semantic segmentation on a small numpy core."""

from .tensor import Conv2dSpec, Tensor
from .autodiff import Tape, backward, finite_diff_check
from .model import Ablation, ModelConfig, init_params, model_forward

__all__ = [
    "Ablation",
    "Conv2dSpec",
    "ModelConfig",
    "Tape",
    "Tensor",
    "backward",
    "finite_diff_check",
    "init_params",
    "model_forward",
]
