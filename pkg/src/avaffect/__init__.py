"""Audio-visual co-attention network with per-second LSTM aggregation."""

from .autodiff import Tensor, backward, constant, grad_check, no_grad, parameter
from .model import ModelConfig, forward, forward_batch, init_model_params

__all__ = [
    "ModelConfig",
    "Tensor",
    "backward",
    "constant",
    "forward",
    "forward_batch",
    "grad_check",
    "init_model_params",
    "no_grad",
    "parameter",
]
__version__ = "0.1.0"
