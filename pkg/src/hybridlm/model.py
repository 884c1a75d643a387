"""Full language model: pattern-driven layer stack with pre-norm residuals.

The stack is described by a LayerPattern string (M = Mamba-2, 1 = Mamba-1,
* = attention, + = MLP). Every layer sits in x <- x + layer(rmsnorm(x));
a final rmsnorm feeds the output head (untied by default, optionally the
transposed embedding). Training runs whole sequences on the tape; decoding
runs tape-free single-token steps against an InferenceSession whose SSM
caches are constant-size and whose KV caches grow one position per token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .layers.attention import (
    AttentionConfig,
    AttentionParams,
    KVCache,
    attention_forward,
    attention_step,
)
from .layers.mamba1 import (
    Mamba1Cache,
    Mamba1Config,
    Mamba1Params,
    mamba1_forward_sequential,
    mamba1_step,
)
from .layers.mamba2 import (
    Mamba2Cache,
    Mamba2Config,
    Mamba2Params,
    mamba2_forward_chunked,
    mamba2_step,
)
from .layers.mlp import MLPConfig, MLPParams, mlp_forward
from .tensor import Tensor, embedding_lookup, matmul, normalize

__all__ = [
    "HybridModelConfig",
    "ModelParams",
    "LayerSlot",
    "InferenceSession",
    "LanguageModel",
    "SizingSpec",
    "build_model",
    "forward_train",
    "prefill",
    "decode_step",
    "generate",
    "equalize_layer_params",
]


@dataclass(frozen=True)
class HybridModelConfig:
    """Primitive-field model description; per-kind layer configs are derived."""

    d_model: int
    pattern: str
    vocab_size: int
    max_seq_len: int = 4096
    tied: bool = False
    pos_emb: str = "none"  # "none" | "rope" (rope applies inside attention layers)
    rope_base: float = 10000.0
    # Mamba-2
    m2_expansion: int = 2
    m2_state: int = 128
    m2_head_dim: int = 64
    m2_groups: int = 8
    m2_conv_width: int = 4
    m2_chunk: int = 64
    m2_norm_groups: int = 0
    m2_conv_channels: str = "xbc"
    m2_norm_kind: str = "rms"
    # Mamba-1
    m1_expansion: int = 2
    m1_state: int = 128
    m1_conv_width: int = 4
    # attention
    attn_heads: int = 32
    attn_head_dim: int = 128
    attn_kv_groups: int = 8
    # MLP
    mlp_expansion: int = 4
    mlp_activation: str = "gelu"
    mlp_hidden: int = 0

    def __post_init__(self):
        from .allocation import pattern_parse

        pattern_parse(self.pattern)  # validates symbols, non-emptiness
        if self.pos_emb not in ("none", "rope"):
            raise ValueError(f"pos_emb must be 'none' or 'rope', got {self.pos_emb!r}")

    @property
    def n_layers(self) -> int:
        return len(self.pattern)

    @property
    def mamba2_config(self) -> Mamba2Config:
        return Mamba2Config(
            d_model=self.d_model, expansion=self.m2_expansion, d_state=self.m2_state,
            head_dim=self.m2_head_dim, n_groups=self.m2_groups,
            conv_width=self.m2_conv_width, chunk_len=self.m2_chunk,
            norm_groups=self.m2_norm_groups, conv_channels=self.m2_conv_channels,
            norm_kind=self.m2_norm_kind,
        )

    @property
    def mamba1_config(self) -> Mamba1Config:
        return Mamba1Config(d_model=self.d_model, expansion=self.m1_expansion,
                            d_state=self.m1_state, conv_width=self.m1_conv_width)

    @property
    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.d_model, n_heads=self.attn_heads, head_dim=self.attn_head_dim,
            n_kv_groups=self.attn_kv_groups,
            rope_base=self.rope_base if self.pos_emb == "rope" else None,
        )

    @property
    def mlp_config(self) -> MLPConfig:
        return MLPConfig(d_model=self.d_model, expansion=self.mlp_expansion,
                         activation=self.mlp_activation, hidden=self.mlp_hidden)


@dataclass
class LayerSlot:
    kind: str  # one of "M", "1", "*", "+"
    prenorm: Tensor
    params: object


@dataclass
class ModelParams:
    embed: Tensor
    layers: list[LayerSlot]
    final_norm: Tensor
    head: Optional[Tensor]  # None when tied to the embedding

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"embed": self.embed}
        for i, slot in enumerate(self.layers):
            named[f"layers.{i}.prenorm"] = slot.prenorm
            for name, t in slot.params.named_tensors().items():
                named[f"layers.{i}.{name}"] = t
        named["final_norm"] = self.final_norm
        if self.head is not None:
            named["head"] = self.head
        return named

    def num_params(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())

    def zero_grads(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None


def build_model(config: HybridModelConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Deterministic initialization; same seed gives bitwise-equal weights."""
    rng = np.random.default_rng(seed)
    V, D, n = config.vocab_size, config.d_model, config.n_layers

    def gain():
        return Tensor(np.ones(D, dtype=dtype), requires_grad=True)

    embed = Tensor(rng.normal(0, 0.02, size=(V, D)).astype(dtype), requires_grad=True)
    layers = []
    for kind in config.pattern:
        if kind == "M":
            p = Mamba2Params.init(config.mamba2_config, rng, n_layers=n, dtype=dtype)
        elif kind == "1":
            p = Mamba1Params.init(config.mamba1_config, rng, n_layers=n, dtype=dtype)
        elif kind == "*":
            p = AttentionParams.init(config.attention_config, rng, n_layers=n, dtype=dtype)
        else:
            p = MLPParams.init(config.mlp_config, rng, n_layers=n, dtype=dtype)
        layers.append(LayerSlot(kind=kind, prenorm=gain(), params=p))
    head = None
    if not config.tied:
        head = Tensor(rng.normal(0, 0.02, size=(D, V)).astype(dtype), requires_grad=True)
    return ModelParams(embed=embed, layers=layers, final_norm=gain(), head=head)


def _check_tokens(config: HybridModelConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.size == 0:
        raise ValueError(f"tokens must be nonempty (batch, length), got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    return tokens


def _layer_forward(config: HybridModelConfig, slot: LayerSlot, h: Tensor,
                   cache=None) -> Tensor:
    if slot.kind == "M":
        return mamba2_forward_chunked(config.mamba2_config, slot.params, h, cache=cache)
    if slot.kind == "1":
        return mamba1_forward_sequential(config.mamba1_config, slot.params, h, cache=cache)
    if slot.kind == "*":
        return attention_forward(config.attention_config, slot.params, h, cache=cache)
    return mlp_forward(config.mlp_config, slot.params, h)


def _logits(config: HybridModelConfig, params: ModelParams, x: Tensor) -> Tensor:
    final = normalize(x, "rmsnorm", params.final_norm)
    if params.head is not None:
        return matmul(final, params.head)
    return matmul(final, params.embed.transpose(1, 0))


def forward_train(config: HybridModelConfig, params: ModelParams, tokens) -> Tensor:
    """Causal logits (B, L, V) for teacher-forced training."""
    tokens = _check_tokens(config, tokens)
    x = embedding_lookup(params.embed, tokens)
    for slot in params.layers:
        h = normalize(x, "rmsnorm", slot.prenorm)
        x = x + _layer_forward(config, slot, h)
    return _logits(config, params, x)


@dataclass
class InferenceSession:
    """Per-layer decode caches plus the number of tokens consumed so far."""

    caches: list
    position: int = 0

    @classmethod
    def new(cls, config: HybridModelConfig, batch: int, dtype=np.float64) -> "InferenceSession":
        caches = []
        for kind in config.pattern:
            if kind == "M":
                caches.append(Mamba2Cache.zeros(config.mamba2_config, batch, dtype=dtype))
            elif kind == "1":
                caches.append(Mamba1Cache.zeros(config.mamba1_config, batch, dtype=dtype))
            elif kind == "*":
                caches.append(KVCache.empty(config.attention_config, batch,
                                            max_len=config.max_seq_len))
            else:
                caches.append(None)
        return cls(caches=caches)

    def num_bytes(self) -> int:
        return sum(c.num_bytes() for c in self.caches if c is not None)

    def save(self, path) -> None:
        arrays = {"position": np.array([self.position], dtype=np.int64)}
        for i, c in enumerate(self.caches):
            if isinstance(c, Mamba2Cache):
                arrays[f"{i}.conv_tail"] = c.conv_tail
                arrays[f"{i}.ssm_state"] = c.ssm_state
            elif isinstance(c, Mamba1Cache):
                arrays[f"{i}.conv_tail"] = c.conv_tail
                arrays[f"{i}.state"] = c.state
            elif isinstance(c, KVCache) and c.k is not None:
                arrays[f"{i}.k"] = c.k
                arrays[f"{i}.v"] = c.v
        np.savez(path, **arrays)

    @classmethod
    def load(cls, config: HybridModelConfig, batch: int, path) -> "InferenceSession":
        with np.load(path) as z:
            session = cls.new(config, batch)
            session.position = int(z["position"][0])
            for i, c in enumerate(session.caches):
                if isinstance(c, Mamba2Cache):
                    c.conv_tail = z[f"{i}.conv_tail"]
                    c.ssm_state = z[f"{i}.ssm_state"]
                elif isinstance(c, Mamba1Cache):
                    c.conv_tail = z[f"{i}.conv_tail"]
                    c.state = z[f"{i}.state"]
                elif isinstance(c, KVCache) and f"{i}.k" in z:
                    c.k = z[f"{i}.k"]
                    c.v = z[f"{i}.v"]
        return session


def prefill(config: HybridModelConfig, params: ModelParams, tokens):
    """Consume a whole prompt at once; returns (session, last-position logits)."""
    tokens = _check_tokens(config, tokens)
    B, L = tokens.shape
    session = InferenceSession.new(config, B, dtype=params.embed.data.dtype)
    x = embedding_lookup(params.embed, tokens)
    for slot, cache in zip(params.layers, session.caches):
        h = normalize(x, "rmsnorm", slot.prenorm)
        x = x + _layer_forward(config, slot, h, cache=cache)
    session.position = L
    logits = _logits(config, params, x[:, L - 1])
    return session, logits.data


def decode_step(config: HybridModelConfig, params: ModelParams,
                session: InferenceSession, token_ids) -> np.ndarray:
    """One token per batch row; returns next-token logits (B, V)."""
    ids = np.asarray(token_ids).reshape(-1)
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    x = params.embed.data[ids]
    for slot, cache in zip(params.layers, session.caches):
        h = normalize(Tensor(x), "rmsnorm", slot.prenorm).data
        if slot.kind == "M":
            y, _ = mamba2_step(config.mamba2_config, slot.params, cache, h)
        elif slot.kind == "1":
            y, _ = mamba1_step(config.mamba1_config, slot.params, cache, h)
        elif slot.kind == "*":
            y, _ = attention_step(config.attention_config, slot.params, cache, h)
        else:
            y = mlp_forward(config.mlp_config, slot.params, Tensor(h)).data
        x = x + y
    session.position += 1
    return _logits(config, params, Tensor(x)).data


def generate(config: HybridModelConfig, params: ModelParams, prompt_ids,
             max_new: int, mode: str = "greedy") -> np.ndarray:
    """Greedy continuation; deterministic. Returns (B, max_new) new ids."""
    if mode != "greedy":
        raise ValueError(f"unsupported generation mode: {mode!r}")
    prompt = np.asarray(prompt_ids)
    squeeze = prompt.ndim == 1
    if squeeze:
        prompt = prompt[None, :]
    if prompt.shape[1] == 0:
        raise ValueError("prompt must be nonempty")
    session, logits = prefill(config, params, prompt)
    out = np.zeros((prompt.shape[0], max_new), dtype=np.int64)
    for t in range(max_new):
        nxt = np.argmax(logits, axis=-1)
        out[:, t] = nxt
        if t + 1 < max_new:
            logits = decode_step(config, params, session, nxt)
    return out[0] if squeeze else out


class LanguageModel:
    """Config + weights + byte tokenizer, exposed at the text level.

    This is the object evaluation code talks to: it completes prompts
    greedily and scores continuations, nothing else.
    """

    def __init__(self, config: HybridModelConfig, params: ModelParams):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: HybridModelConfig, seed: int) -> "LanguageModel":
        return cls(config, build_model(config, seed))

    def complete(self, text: str, max_new: int = 64, stop: str = "\n") -> str:
        """Greedy continuation, cut at the stop character or end marker."""
        from .tokenizer import EOS_ID, decode as tok_decode, encode as tok_encode

        prompt = tok_encode(text)
        session, logits = prefill(self.config, self.params, prompt[None, :])
        out = []
        stop_ids = {EOS_ID} | {b for b in stop.encode("utf-8")}
        for _ in range(max_new):
            nxt = int(np.argmax(logits[0]))
            if nxt in stop_ids:
                break
            out.append(nxt)
            if session.position >= self.config.max_seq_len:
                break
            logits = decode_step(self.config, self.params, session, np.array([nxt]))
        return tok_decode(np.array(out, dtype=np.int64))

    def answer(self, sample) -> str:
        """Complete a task prompt with just enough budget for its answer."""
        budget = len(sample.answer.encode("utf-8")) + 8
        return self.complete(sample.prompt, max_new=budget)

    def token_logprobs(self, prefix_ids, continuation_ids) -> np.ndarray:
        """Log-probability of each continuation token given all before it."""
        prefix = np.asarray(prefix_ids, dtype=np.int64).reshape(-1)
        cont = np.asarray(continuation_ids, dtype=np.int64).reshape(-1)
        if prefix.size == 0 or cont.size == 0:
            raise ValueError("prefix and continuation must be nonempty")
        ids = np.concatenate([prefix, cont])
        logits = forward_train(self.config, self.params, ids[None, :]).data[0]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1))
        positions = np.arange(prefix.size - 1, ids.size - 1)
        return shifted[positions, cont] - logz[positions]

    def text_logprobs(self, prompt: str, target: str) -> np.ndarray:
        from .tokenizer import encode as tok_encode

        return self.token_logprobs(tok_encode(prompt), tok_encode(target))


@dataclass(frozen=True)
class SizingSpec:
    """Integer head count / MLP width matching a per-layer parameter budget."""

    per_layer_target: int
    attention_heads: int
    attention_params: int
    mlp_hidden: int
    mlp_expansion: float
    mlp_params: int


def equalize_layer_params(d_model: int, mamba2_config: Mamba2Config,
                          head_dim: int = 128, activation: str = "gelu",
                          tolerance: float = 0.02) -> SizingSpec:
    """Pick MHA head count and MLP hidden width whose per-layer parameter
    counts best match the Mamba-2 layer's, each within ``tolerance``."""
    from .costmodel import layer_params

    target = layer_params("M", _sizing_config(d_model, mamba2_config, head_dim, activation))
    per_head = 4 * d_model * head_dim
    heads = max(1, round(target / per_head))
    attn = per_head * heads
    mats = 2 if activation == "gelu" else 3
    hidden = max(8, 8 * round(target / (mats * d_model * 8)))
    mlp = mats * d_model * hidden
    for name, value in (("attention", attn), ("mlp", mlp)):
        err = abs(value - target) / target
        if err > tolerance:
            raise ValueError(
                f"cannot match per-layer budget: {name} best is {value} "
                f"vs target {target} ({err:.1%} > {tolerance:.0%})"
            )
    return SizingSpec(per_layer_target=target, attention_heads=heads,
                      attention_params=attn, mlp_hidden=hidden,
                      mlp_expansion=hidden / d_model, mlp_params=mlp)


def _sizing_config(d_model: int, m2: Mamba2Config, head_dim: int, activation: str):
    return HybridModelConfig(
        d_model=d_model, pattern="M", vocab_size=2, max_seq_len=2,
        m2_expansion=m2.expansion, m2_state=m2.d_state, m2_head_dim=m2.head_dim,
        m2_groups=m2.n_groups, m2_conv_width=m2.conv_width,
        m2_conv_channels=m2.conv_channels,
        attn_heads=1, attn_head_dim=head_dim, attn_kv_groups=1,
        mlp_activation=activation,
    )
