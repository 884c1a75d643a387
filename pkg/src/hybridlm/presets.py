"""The four 8B-class reference configurations.

These are the analytical-model inputs: parameter totals land within 1.5%
of the published sizes. The hybrid interleaves its 4 attention and 28 MLP
layers among 24 Mamba-2 layers via allocate_layers and runs without any
explicit positional encoding; the Transformer is 32 (attention, MLP)
blocks with rotary embeddings.
"""

from __future__ import annotations

from .allocation import allocate_layers
from .model import HybridModelConfig

__all__ = [
    "transformer_8b",
    "mamba1_8b",
    "mamba2_8b",
    "hybrid_8b",
    "PRESETS",
]

_VOCAB = 256000
_SEQ = 4096


def transformer_8b() -> HybridModelConfig:
    # swiglu width pinned at 10944; the nearest-multiple-of-128 rule would
    # give 10880, which misses the published total by more
    return HybridModelConfig(
        d_model=4096, pattern="*+" * 32, vocab_size=_VOCAB, max_seq_len=_SEQ,
        pos_emb="rope",
        attn_heads=32, attn_head_dim=128, attn_kv_groups=32,
        mlp_activation="swiglu", mlp_hidden=10944,
    )


def mamba1_8b() -> HybridModelConfig:
    return HybridModelConfig(
        d_model=4096, pattern="1" * 56, vocab_size=_VOCAB, max_seq_len=_SEQ,
        m1_state=128,
    )


def mamba2_8b() -> HybridModelConfig:
    return HybridModelConfig(
        d_model=4096, pattern="M" * 56, vocab_size=_VOCAB, max_seq_len=_SEQ,
    )


def hybrid_8b() -> HybridModelConfig:
    pattern = str(allocate_layers(56, attention_ratio=0.08, mlp_ratio=0.5))
    return HybridModelConfig(
        d_model=4096, pattern=pattern, vocab_size=_VOCAB, max_seq_len=_SEQ,
        attn_heads=32, attn_head_dim=128, attn_kv_groups=8,
        mlp_activation="gelu", mlp_expansion=4,
    )


PRESETS = {
    "transformer-8b": transformer_8b,
    "mamba-8b": mamba1_8b,
    "mamba2-8b": mamba2_8b,
    "hybrid-8b": hybrid_8b,
}
