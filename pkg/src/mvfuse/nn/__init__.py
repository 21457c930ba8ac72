"""Small deterministic neural-network kernel on top of numpy."""
from .layers import (
    AttentionConfig,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    feed_forward,
    linear,
    multi_head_attention,
)
from .optim import AdamState, MissingGradError, adam_step
from .params import (
    ParamStore,
    ParamTensor,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    gelu,
    layer_norm,
    softmax,
)

__all__ = [
    "AdamState",
    "AttentionConfig",
    "FeedForward",
    "LayerNorm",
    "Linear",
    "MissingGradError",
    "MultiHeadAttention",
    "NumericError",
    "ParamStore",
    "ParamTensor",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "decode_checkpoint",
    "encode_checkpoint",
    "feed_forward",
    "gelu",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "multi_head_attention",
    "save_checkpoint",
    "softmax",
]
