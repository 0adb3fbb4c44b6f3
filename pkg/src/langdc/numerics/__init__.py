"""Minimal float64 tensor library with tape-based reverse-mode differentiation."""

from . import kernels, ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import (
    MLP,
    Block,
    CapacityError,
    Embedding,
    KVCache,
    LayerNorm,
    Linear,
    LoRALinear,
    Module,
    Parameter,
    SelfAttention,
    causal_self_attention,
    lora_apply,
)
from .ops import (
    attention,
    concat,
    cross_entropy,
    layer_norm,
    linear,
    matmul,
    softmax_rows,
    take,
)
from .optim import AdamW, adamw_step, cosine_lr
from .tensor import DimensionError, NumericError, Tape, TapeConsumedError, Tensor, backward, no_tape

__all__ = [
    "AdamW", "Block", "CapacityError", "DimensionError", "Embedding", "KVCache", "LayerNorm",
    "Linear", "LoRALinear", "MLP", "Module", "NumericError", "Parameter", "SelfAttention",
    "Tape", "TapeConsumedError", "Tensor", "adamw_step", "attention", "backward",
    "causal_self_attention", "check_gradients", "concat", "cosine_lr", "cross_entropy",
    "kernels", "layer_norm", "linear", "lora_apply", "matmul", "no_tape", "numeric_grad", "ops",
    "relative_error", "softmax_rows", "take",
]
