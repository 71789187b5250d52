from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .nn import Conv2d, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .ops import (conv2d, conv2d_backward, gelu, gelu_backward, layer_norm,
                  layer_norm_backward, log_softmax, matmul, matmul_backward,
                  softmax, softmax_backward)
from .optim import AdamW, OptimizerState, adamw_step
from .tensor import NonFiniteError, Tensor, check_finite

__all__ = [
    "AdamW", "CheckpointError", "Conv2d", "FeedForward", "GradCheckReport",
    "LayerNorm", "Linear", "Module", "MultiHeadAttention", "NonFiniteError",
    "OptimizerState", "Tensor", "adamw_step", "check_finite", "conv2d",
    "conv2d_backward", "gelu", "gelu_backward", "grad_check", "layer_norm",
    "layer_norm_backward", "load_checkpoint", "log_softmax", "matmul",
    "matmul_backward", "save_checkpoint", "softmax", "softmax_backward",
]
