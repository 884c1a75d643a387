"""Mamba-2 mixer block: selective state-space layer with multi-head state.

Three execution modes over identical parameters:
  * sequential: literal per-timestep recurrence, the correctness reference
  * chunked: block-parallel scan used for training (same result to ~1e-12)
  * step: single-token recurrent decode against a constant-size cache

Recurrence, per head h with group g = h // (n_heads/n_groups):
    delta_t = softplus(dt_t + dt_bias_h)
    S_t = exp(delta_t * A_h) * S_{t-1} + delta_t * outer(B_t[g], x_t[h])
    y_t = C_t[g] @ S_t + skip_h * x_t[h]
with A_h = -exp(a_log_h) < 0, S in R^{N x P}. The (x, B, C) streams pass
through a short causal conv + SiLU first; output is
out_proj(grouped_norm(y * silu(z))).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..tensor import (
    Tape,
    Tensor,
    causal_conv1d,
    concat,
    cumsum,
    einsum,
    exp,
    matmul,
    normalize,
    pad_axis,
    silu,
    softplus,
)

__all__ = [
    "Mamba2Config",
    "Mamba2Params",
    "Mamba2Cache",
    "mamba2_forward_sequential",
    "mamba2_forward_chunked",
    "mamba2_step",
]

# exp(-_MASK_NEG) underflows to exactly 0, killing upper-triangle entries
_MASK_NEG = 1e4


@dataclass(frozen=True)
class Mamba2Config:
    d_model: int
    expansion: int = 2
    d_state: int = 128
    head_dim: int = 64
    n_groups: int = 8
    conv_width: int = 4
    chunk_len: int = 64
    norm_groups: int = 0  # 0 = use n_groups
    conv_channels: str = "xbc"  # or "x"
    norm_kind: str = "rms"  # or "layernorm"

    def __post_init__(self):
        if self.d_inner % self.head_dim != 0:
            raise ValueError(f"d_inner {self.d_inner} not divisible by head_dim {self.head_dim}")
        if self.n_heads % self.n_groups != 0:
            raise ValueError(f"n_heads {self.n_heads} not divisible by n_groups {self.n_groups}")
        if self.conv_channels not in ("xbc", "x"):
            raise ValueError(f"conv_channels must be 'xbc' or 'x', got {self.conv_channels!r}")
        if self.norm_kind not in ("rms", "layernorm"):
            raise ValueError(f"norm_kind must be 'rms' or 'layernorm', got {self.norm_kind!r}")
        if self.norm_groups == 0:
            object.__setattr__(self, "norm_groups", self.n_groups)
        if self.d_inner % self.norm_groups != 0:
            raise ValueError("d_inner not divisible by norm_groups")

    @property
    def d_inner(self) -> int:
        return self.expansion * self.d_model

    @property
    def n_heads(self) -> int:
        return self.d_inner // self.head_dim

    @property
    def conv_dim(self) -> int:
        bc = 2 * self.n_groups * self.d_state
        return self.d_inner + bc if self.conv_channels == "xbc" else self.d_inner


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


@dataclass
class Mamba2Params:
    in_proj: Tensor
    conv_w: Tensor
    conv_b: Tensor
    a_log: Tensor
    dt_bias: Tensor
    skip: Tensor
    norm_gain: Tensor
    out_proj: Tensor

    @classmethod
    def init(cls, cfg: Mamba2Config, rng: np.random.Generator,
             n_layers: int = 1, dtype=np.float64) -> "Mamba2Params":
        di, gn, H = cfg.d_inner, cfg.n_groups * cfg.d_state, cfg.n_heads
        total = 2 * di + 2 * gn + H
        std = 0.02
        w_in = rng.normal(0.0, std, size=(cfg.d_model, total))
        w_conv = rng.normal(0.0, std, size=(cfg.conv_width, cfg.conv_dim))
        # A_h in [-16, -1], log-uniform; softplus(dt_bias) in [1e-3, 1e-1], log-uniform
        a_log = np.log(np.exp(rng.uniform(0.0, math.log(16.0), size=H)))
        dt_bias = _inv_softplus(np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=H)))
        w_out = rng.normal(0.0, std / math.sqrt(2 * n_layers), size=(di, cfg.d_model))

        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

        return cls(
            in_proj=t(w_in),
            conv_w=t(w_conv),
            conv_b=t(np.zeros(cfg.conv_dim)),
            a_log=t(a_log),
            dt_bias=t(dt_bias),
            skip=t(np.ones(H)),
            norm_gain=t(np.ones(di)),
            out_proj=t(w_out),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "in_proj": self.in_proj,
            "conv_w": self.conv_w,
            "conv_b": self.conv_b,
            "a_log": self.a_log,
            "dt_bias": self.dt_bias,
            "skip": self.skip,
            "norm_gain": self.norm_gain,
            "out_proj": self.out_proj,
        }


@dataclass
class Mamba2Cache:
    """Fixed-size decode state: conv window tail plus per-head N x P matrices."""

    conv_tail: np.ndarray  # (B, conv_width-1, conv_dim)
    ssm_state: np.ndarray  # (B, G, heads_per_group, N, P)

    @classmethod
    def zeros(cls, cfg: Mamba2Config, batch: int, dtype=np.float64) -> "Mamba2Cache":
        hpg = cfg.n_heads // cfg.n_groups
        return cls(
            conv_tail=np.zeros((batch, cfg.conv_width - 1, cfg.conv_dim), dtype=dtype),
            ssm_state=np.zeros((batch, cfg.n_groups, hpg, cfg.d_state, cfg.head_dim), dtype=dtype),
        )

    def num_bytes(self) -> int:
        return self.conv_tail.nbytes + self.ssm_state.nbytes


def _project(cfg: Mamba2Config, params: Mamba2Params, x: Tensor, cache=None):
    """in_proj + conv/SiLU front end shared by every mode.

    Returns (z, x_heads, B, C, delta) with x already SiLU'd post-conv.
    When a cache is given its conv window is filled with the last pre-conv
    rows so a later mamba2_step continues the same convolution.
    """
    di, gn = cfg.d_inner, cfg.n_groups * cfg.d_state
    u = matmul(x, params.in_proj)
    z = u[..., :di]
    if cache is not None:
        L, W = x.shape[1], cfg.conv_width
        k = min(W - 1, L)
        cache.conv_tail[:] = 0.0
        if k:
            cache.conv_tail[:, W - 1 - k:] = u.data[:, L - k:L, di:di + cfg.conv_dim]
    if cfg.conv_channels == "xbc":
        xbc = silu(causal_conv1d(u[..., di:2 * di + 2 * gn], params.conv_w, params.conv_b))
        xi = xbc[..., :di]
        Bm = xbc[..., di:di + gn]
        Cm = xbc[..., di + gn:]
    else:
        xi = silu(causal_conv1d(u[..., di:2 * di], params.conv_w, params.conv_b))
        Bm = u[..., 2 * di:2 * di + gn]
        Cm = u[..., 2 * di + gn:2 * di + 2 * gn]
    dt = u[..., 2 * di + 2 * gn:]
    delta = softplus(dt + params.dt_bias)
    return z, xi, Bm, Cm, delta


def _finish(cfg: Mamba2Config, params: Mamba2Params, y: Tensor, z: Tensor) -> Tensor:
    gated = y * silu(z)
    kind = "grouprms" if cfg.norm_kind == "rms" else "groupnorm"
    normed = normalize(gated, kind, params.norm_gain, groups=cfg.norm_groups)
    return matmul(normed, params.out_proj)


def mamba2_forward_sequential(cfg: Mamba2Config, params: Mamba2Params, x: Tensor,
                              cache: Optional[Mamba2Cache] = None) -> Tensor:
    """Literal recurrence over timesteps. Reference implementation."""
    B, L, _ = x.shape
    G, N, P = cfg.n_groups, cfg.d_state, cfg.head_dim
    hpg = cfg.n_heads // G
    z, xi, Bm, Cm, delta = _project(cfg, params, x, cache=cache)
    xh = xi.reshape(B, L, G, hpg, P)
    Bg = Bm.reshape(B, L, G, N)
    Cg = Cm.reshape(B, L, G, N)
    dl = delta.reshape(B, L, G, hpg)
    A = -exp(params.a_log).reshape(G, hpg)
    alpha = exp(dl * A)
    S = Tensor(np.zeros((B, G, hpg, N, P), dtype=x.data.dtype))
    ys = []
    for t in range(L):
        term = einsum("bgh,bgn,bghp->bghnp", dl[:, t], Bg[:, t], xh[:, t])
        S = alpha[:, t].reshape(B, G, hpg, 1, 1) * S + term
        yt = einsum("bgn,bghnp->bghp", Cg[:, t], S)
        ys.append(yt.reshape(B, 1, G, hpg, P))
    if cache is not None:
        cache.ssm_state = S.data.copy()
    y = concat(ys, axis=1) + xh * params.skip.reshape(G, hpg, 1)
    return _finish(cfg, params, y.reshape(B, L, cfg.d_inner), z)


def mamba2_forward_chunked(cfg: Mamba2Config, params: Mamba2Params, x: Tensor,
                           cache: Optional[Mamba2Cache] = None) -> Tensor:
    """Block-parallel scan: intra-chunk triangular mix plus inter-chunk carry.

    Sequence is zero-padded to a chunk multiple with delta = 0 there, which
    makes padded positions exact no-ops on the carried state.
    """
    B, L, _ = x.shape
    G, N, P, Q = cfg.n_groups, cfg.d_state, cfg.head_dim, cfg.chunk_len
    hpg = cfg.n_heads // G
    nc = (L + Q - 1) // Q
    pad = nc * Q - L
    z, xi, Bm, Cm, delta = _project(cfg, params, x, cache=cache)
    if pad:
        xi = pad_axis(xi, 1, 0, pad)
        Bm = pad_axis(Bm, 1, 0, pad)
        Cm = pad_axis(Cm, 1, 0, pad)
        delta = pad_axis(delta, 1, 0, pad)
    xh = xi.reshape(B, nc, Q, G, hpg, P)
    Bg = Bm.reshape(B, nc, Q, G, N)
    Cg = Cm.reshape(B, nc, Q, G, N)
    dl = delta.reshape(B, nc, Q, G, hpg)
    A = -exp(params.a_log).reshape(G, hpg)
    lam = cumsum(dl * A, axis=2)  # inclusive log-decay within chunk

    # intra-chunk: (i, j) entry = exp(lam_i - lam_j) * (C_i . B_j) * delta_j, i >= j
    cb = einsum("bcign,bcjgn->bcijg", Cg, Bg)
    diff = lam.reshape(B, nc, Q, 1, G, hpg) - lam.reshape(B, nc, 1, Q, G, hpg)
    tril = np.tril(np.ones((Q, Q))).reshape(1, 1, Q, Q, 1, 1)
    decay = exp(diff * tril + (tril - 1.0) * _MASK_NEG)
    T = decay * cb.reshape(B, nc, Q, Q, G, 1) * dl.reshape(B, nc, 1, Q, G, hpg)
    y_intra = einsum("bcijgh,bcjghp->bcighp", T, xh)

    lam_last = lam[:, :, Q - 1]  # (B, nc, G, hpg)
    wj = exp(lam_last.reshape(B, nc, 1, G, hpg) - lam) * dl
    d_in = exp(lam)

    S = Tensor(np.zeros((B, G, hpg, N, P), dtype=x.data.dtype))
    chunks = []
    for c in range(nc):
        y_inter = einsum("bign,bigh,bghnp->bighp", Cg[:, c], d_in[:, c], S)
        chunks.append(y_intra[:, c] + y_inter)
        carry = einsum("bjgh,bjgn,bjghp->bghnp", wj[:, c], Bg[:, c], xh[:, c])
        S = exp(lam_last[:, c]).reshape(B, G, hpg, 1, 1) * S + carry
    if cache is not None:
        # delta = 0 at padded positions, so the carried state is exactly
        # the state after position L - 1
        cache.ssm_state = S.data.copy()
    y = concat(chunks, axis=1) + xh.reshape(B, nc * Q, G, hpg, P) * params.skip.reshape(G, hpg, 1)
    y = y[:, :L].reshape(B, L, cfg.d_inner)
    return _finish(cfg, params, y, z)


def mamba2_step(cfg: Mamba2Config, params: Mamba2Params, cache: Mamba2Cache, x_t):
    """One decode step. x_t is (B, D); returns ((B, D) array, updated cache).

    Runs the same op formulas as the forwards, tape-free on plain arrays.
    """
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    B = x_t.shape[0]
    di, gn = cfg.d_inner, cfg.n_groups * cfg.d_state
    G, N, P = cfg.n_groups, cfg.d_state, cfg.head_dim
    hpg = cfg.n_heads // G

    u = matmul(Tensor(x_t), params.in_proj).data
    z = u[:, :di]
    lo, hi = di, di + cfg.conv_dim
    window = np.concatenate([cache.conv_tail, u[:, None, lo:hi]], axis=1)
    conv_out = np.einsum("wc,bwc->bc", params.conv_w.data, window) + params.conv_b.data
    conv_out = silu(Tensor(conv_out)).data
    cache.conv_tail = np.ascontiguousarray(window[:, 1:])
    if cfg.conv_channels == "xbc":
        xi, Bv, Cv = conv_out[:, :di], conv_out[:, di:di + gn], conv_out[:, di + gn:]
    else:
        xi = conv_out
        Bv = u[:, 2 * di:2 * di + gn]
        Cv = u[:, 2 * di + gn:2 * di + 2 * gn]
    dt = u[:, 2 * di + 2 * gn:]
    delta = softplus(Tensor(dt) + params.dt_bias).data
    A = -np.exp(params.a_log.data)
    alpha = np.exp(delta * A)

    xv = xi.reshape(B, G, hpg, P)
    Bv = Bv.reshape(B, G, N)
    Cv = Cv.reshape(B, G, N)
    dl = delta.reshape(B, G, hpg)
    S = alpha.reshape(B, G, hpg, 1, 1) * cache.ssm_state
    S += np.einsum("bgh,bgn,bghp->bghnp", dl, Bv, xv)
    cache.ssm_state = S
    y = np.einsum("bgn,bghnp->bghp", Cv, S)
    y += xv * params.skip.data.reshape(G, hpg, 1)
    out = _finish(cfg, params, Tensor(y.reshape(B, di)), Tensor(z))
    return out.data, cache
