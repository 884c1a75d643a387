from .attention import (
    AttentionConfig,
    AttentionParams,
    KVCache,
    attention_forward,
    attention_step,
)
from .mamba1 import (
    Mamba1Cache,
    Mamba1Config,
    Mamba1Params,
    mamba1_forward_sequential,
    mamba1_step,
)
from .mamba2 import (
    Mamba2Cache,
    Mamba2Config,
    Mamba2Params,
    mamba2_forward_chunked,
    mamba2_forward_sequential,
    mamba2_step,
)
from .mlp import MLPConfig, MLPParams, mlp_forward, swiglu_hidden

__all__ = [
    "AttentionConfig",
    "AttentionParams",
    "KVCache",
    "attention_forward",
    "attention_step",
    "Mamba1Cache",
    "Mamba1Config",
    "Mamba1Params",
    "mamba1_forward_sequential",
    "mamba1_step",
    "Mamba2Cache",
    "Mamba2Config",
    "Mamba2Params",
    "mamba2_forward_chunked",
    "mamba2_forward_sequential",
    "mamba2_step",
    "MLPConfig",
    "MLPParams",
    "mlp_forward",
    "swiglu_hidden",
]
