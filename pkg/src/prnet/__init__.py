"""Progressive recurrent shadow removal on a small numpy autodiff engine."""

from .model import ModelConfig, ModelParams, count_flops, count_params, forward, init_params
from .tensor import Tensor

__all__ = ["ModelConfig", "ModelParams", "Tensor", "count_flops", "count_params", "forward", "init_params"]
__version__ = "0.1.0"
