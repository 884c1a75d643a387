"""Original selective-SSM mixer (per-channel state, low-rank delta projection).

Differences from the Mamba-2 block: the conv covers only the x stream, the
step size comes from a rank-reduced projection of the post-conv activations
instead of the input projection, state decay A is a full (d_inner, N) matrix
rather than per-head scalars, and there is no internal norm before out_proj.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..tensor import (
    Tensor,
    causal_conv1d,
    concat,
    einsum,
    exp,
    matmul,
    silu,
    softplus,
)

__all__ = [
    "Mamba1Config",
    "Mamba1Params",
    "Mamba1Cache",
    "mamba1_forward_sequential",
    "mamba1_step",
]


@dataclass(frozen=True)
class Mamba1Config:
    d_model: int
    expansion: int = 2
    d_state: int = 128
    conv_width: int = 4

    @property
    def d_inner(self) -> int:
        return self.expansion * self.d_model

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.d_model / 16)


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


@dataclass
class Mamba1Params:
    in_proj: Tensor
    conv_w: Tensor
    conv_b: Tensor
    x_proj: Tensor
    dt_proj: Tensor
    dt_bias: Tensor
    a_log: Tensor
    skip: Tensor
    out_proj: Tensor

    @classmethod
    def init(cls, cfg: Mamba1Config, rng: np.random.Generator,
             n_layers: int = 1, dtype=np.float64) -> "Mamba1Params":
        di, N, R = cfg.d_inner, cfg.d_state, cfg.dt_rank
        std = 0.02

        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

        return cls(
            in_proj=t(rng.normal(0, std, size=(cfg.d_model, 2 * di))),
            conv_w=t(rng.normal(0, std, size=(cfg.conv_width, di))),
            conv_b=t(np.zeros(di)),
            x_proj=t(rng.normal(0, std, size=(di, R + 2 * N))),
            dt_proj=t(rng.normal(0, std, size=(R, di))),
            dt_bias=t(_inv_softplus(np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=di)))),
            a_log=t(rng.uniform(0.0, math.log(16.0), size=(di, N))),
            skip=t(np.ones(di)),
            out_proj=t(rng.normal(0, std / math.sqrt(2 * n_layers), size=(di, cfg.d_model))),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "in_proj": self.in_proj,
            "conv_w": self.conv_w,
            "conv_b": self.conv_b,
            "x_proj": self.x_proj,
            "dt_proj": self.dt_proj,
            "dt_bias": self.dt_bias,
            "a_log": self.a_log,
            "skip": self.skip,
            "out_proj": self.out_proj,
        }


@dataclass
class Mamba1Cache:
    conv_tail: np.ndarray  # (B, conv_width-1, d_inner)
    state: np.ndarray  # (B, d_inner, N)

    @classmethod
    def zeros(cls, cfg: Mamba1Config, batch: int, dtype=np.float64) -> "Mamba1Cache":
        return cls(
            conv_tail=np.zeros((batch, cfg.conv_width - 1, cfg.d_inner), dtype=dtype),
            state=np.zeros((batch, cfg.d_inner, cfg.d_state), dtype=dtype),
        )

    def num_bytes(self) -> int:
        return self.conv_tail.nbytes + self.state.nbytes


def _split(cfg: Mamba1Config, params: Mamba1Params, xc: Tensor):
    """Post-conv projections: (delta, B, C) from the rank-reduced x_proj."""
    R, N = cfg.dt_rank, cfg.d_state
    proj = matmul(xc, params.x_proj)
    dtr = proj[..., :R]
    Bm = proj[..., R:R + N]
    Cm = proj[..., R + N:]
    delta = softplus(matmul(dtr, params.dt_proj) + params.dt_bias)
    return delta, Bm, Cm


def mamba1_forward_sequential(cfg: Mamba1Config, params: Mamba1Params, x: Tensor,
                              cache: Optional[Mamba1Cache] = None) -> Tensor:
    B, L, _ = x.shape
    di, N = cfg.d_inner, cfg.d_state
    u = matmul(x, params.in_proj)
    z = u[..., :di]
    if cache is not None:
        W = cfg.conv_width
        k = min(W - 1, L)
        cache.conv_tail[:] = 0.0
        if k:
            cache.conv_tail[:, W - 1 - k:] = u.data[:, L - k:L, di:]
    xc = silu(causal_conv1d(u[..., di:], params.conv_w, params.conv_b))
    delta, Bm, Cm = _split(cfg, params, xc)
    A = -exp(params.a_log)  # (di, N)
    h = Tensor(np.zeros((B, di, N), dtype=x.data.dtype))
    ys = []
    for t in range(L):
        dt = delta[:, t].reshape(B, di, 1)
        a = exp(dt * A)
        h = a * h + dt * Bm[:, t].reshape(B, 1, N) * xc[:, t].reshape(B, di, 1)
        yt = einsum("bn,bcn->bc", Cm[:, t], h) + params.skip * xc[:, t]
        ys.append(yt.reshape(B, 1, di))
    if cache is not None:
        cache.state = h.data.copy()
    y = concat(ys, axis=1)
    return matmul(y * silu(z), params.out_proj)


def mamba1_step(cfg: Mamba1Config, params: Mamba1Params, cache: Mamba1Cache, x_t):
    """One decode step on plain arrays; returns ((B, D), updated cache)."""
    x_t = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
    di, N = cfg.d_inner, cfg.d_state
    u = x_t @ params.in_proj.data
    z = u[:, :di]
    window = np.concatenate([cache.conv_tail, u[:, None, di:]], axis=1)
    conv = np.einsum("wc,bwc->bc", params.conv_w.data, window) + params.conv_b.data
    cache.conv_tail = np.ascontiguousarray(window[:, 1:])
    xc = silu(Tensor(conv)).data
    delta, Bm, Cm = _split(cfg, params, Tensor(xc))
    delta, Bm, Cm = delta.data, Bm.data, Cm.data
    A = -np.exp(params.a_log.data)
    dt = delta[:, :, None]
    h = np.exp(dt * A) * cache.state + dt * Bm[:, None, :] * xc[:, :, None]
    cache.state = h
    y = np.einsum("bn,bcn->bc", Cm, h) + params.skip.data * xc
    gated = y * silu(Tensor(z)).data
    return gated @ params.out_proj.data, cache
