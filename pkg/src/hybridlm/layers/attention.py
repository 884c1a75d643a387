"""Causal self-attention with grouped KV heads and optional rotary embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..tensor import Tensor, concat, einsum, matmul, softmax_rows

__all__ = [
    "AttentionConfig",
    "AttentionParams",
    "KVCache",
    "attention_forward",
    "attention_step",
]

_MASK_OFFSET = 1e9  # large enough that exp(logit - max) underflows to 0


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int = 32
    head_dim: int = 128
    n_kv_groups: int = 8
    rope_base: Optional[float] = None  # None = no positional information injected

    def __post_init__(self):
        if self.n_heads % self.n_kv_groups != 0:
            raise ValueError(
                f"n_heads {self.n_heads} not divisible by n_kv_groups {self.n_kv_groups}"
            )
        if self.rope_base is not None and self.head_dim % 2 != 0:
            raise ValueError("rotary embedding needs an even head_dim")


@dataclass
class AttentionParams:
    q_proj: Tensor
    k_proj: Tensor
    v_proj: Tensor
    o_proj: Tensor

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator,
             n_layers: int = 1, dtype=np.float64) -> "AttentionParams":
        D, H, P, Hkv = cfg.d_model, cfg.n_heads, cfg.head_dim, cfg.n_kv_groups
        std = 0.02

        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

        return cls(
            q_proj=t(rng.normal(0, std, size=(D, H * P))),
            k_proj=t(rng.normal(0, std, size=(D, Hkv * P))),
            v_proj=t(rng.normal(0, std, size=(D, Hkv * P))),
            o_proj=t(rng.normal(0, std / math.sqrt(2 * n_layers), size=(H * P, D))),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {"q_proj": self.q_proj, "k_proj": self.k_proj,
                "v_proj": self.v_proj, "o_proj": self.o_proj}


@dataclass
class KVCache:
    """Per-layer decode cache; grows by one position per appended token."""

    k: Optional[np.ndarray]  # (B, len, n_kv_groups, head_dim), rotary already applied
    v: Optional[np.ndarray]
    max_len: Optional[int] = None

    @classmethod
    def empty(cls, cfg: AttentionConfig, batch: int, dtype=np.float64,
              max_len: Optional[int] = None) -> "KVCache":
        del cfg, batch, dtype  # shape is determined by the first append
        return cls(k=None, v=None, max_len=max_len)

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[1]

    def num_bytes(self) -> int:
        return 0 if self.k is None else self.k.nbytes + self.v.nbytes

    def extend(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        new_len = self.length + k_new.shape[1]
        if self.max_len is not None and new_len > self.max_len:
            raise ValueError(f"KV cache limit {self.max_len} exceeded ({new_len})")
        if self.k is None:
            self.k, self.v = k_new.copy(), v_new.copy()
        else:
            self.k = np.concatenate([self.k, k_new], axis=1)
            self.v = np.concatenate([self.v, v_new], axis=1)


def _rope_angles(positions: np.ndarray, head_dim: int, base: float):
    half = head_dim // 2
    theta = base ** (-2.0 * np.arange(half) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * theta
    return np.cos(ang), np.sin(ang)


def _rope_apply(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of x (B, L, H, P); cos/sin are (L, P/2)."""
    B, L, H, P = x.shape
    half = P // 2
    xp = x.reshape(B, L, H, half, 2)
    e, o = xp[..., 0], xp[..., 1]
    c = cos.reshape(1, L, 1, half)
    s = sin.reshape(1, L, 1, half)
    re = e * c - o * s
    im = e * s + o * c
    out = concat([re.reshape(B, L, H, half, 1), im.reshape(B, L, H, half, 1)], axis=4)
    return out.reshape(B, L, H, P)


def _rope_apply_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def attention_forward(cfg: AttentionConfig, params: AttentionParams, x: Tensor,
                      pos_offset: int = 0, cache: Optional[KVCache] = None) -> Tensor:
    """Full causal forward. With ``cache`` given, also appends every position's
    K/V (rotary applied) so decoding can continue where the sequence ends."""
    B, L, _ = x.shape
    H, P, Hkv = cfg.n_heads, cfg.head_dim, cfg.n_kv_groups
    share = H // Hkv
    q = matmul(x, params.q_proj).reshape(B, L, H, P)
    k = matmul(x, params.k_proj).reshape(B, L, Hkv, P)
    v = matmul(x, params.v_proj).reshape(B, L, Hkv, P)
    if cfg.rope_base is not None:
        cos, sin = _rope_angles(pos_offset + np.arange(L), P, cfg.rope_base)
        q = _rope_apply(q, cos, sin)
        k = _rope_apply(k, cos, sin)
    qg = q.reshape(B, L, Hkv, share, P)
    logits = einsum("blkrp,bmkp->bklrm", qg, k) * (1.0 / math.sqrt(P))
    tril = np.tril(np.ones((L, L))).reshape(1, 1, L, 1, L)
    masked = logits * tril + (tril - 1.0) * _MASK_OFFSET
    w = softmax_rows(masked)
    o = einsum("bklrm,bmkp->blkrp", w, v)
    out = matmul(o.reshape(B, L, H * P), params.o_proj)
    if cache is not None:
        cache.extend(k.data, v.data)
    return out


def attention_step(cfg: AttentionConfig, params: AttentionParams, cache: KVCache, x_t):
    """Decode one token (B, D) against the cache; appends its K/V first."""
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    B = x_t.shape[0]
    H, P, Hkv = cfg.n_heads, cfg.head_dim, cfg.n_kv_groups
    share = H // Hkv
    pos = cache.length
    q = (x_t @ params.q_proj.data).reshape(B, H, P)
    k = (x_t @ params.k_proj.data).reshape(B, Hkv, P)
    v = (x_t @ params.v_proj.data).reshape(B, Hkv, P)
    if cfg.rope_base is not None:
        cos, sin = _rope_angles(np.array([pos]), P, cfg.rope_base)
        q = _rope_apply_np(q, cos[0], sin[0])
        k = _rope_apply_np(k, cos[0], sin[0])
    cache.extend(k[:, None], v[:, None])
    qg = q.reshape(B, Hkv, share, P)
    logits = np.einsum("bkrp,bmkp->bkrm", qg, cache.k) / math.sqrt(P)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    o = np.einsum("bkrm,bmkp->bkrp", w, cache.v)
    return o.reshape(B, H * P) @ params.o_proj.data, cache
