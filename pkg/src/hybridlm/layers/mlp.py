"""Position-wise MLP: plain GELU stack or SwiGLU, both bias-free."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..tensor import Tensor, gelu, matmul, silu

__all__ = ["MLPConfig", "MLPParams", "mlp_forward", "swiglu_hidden"]


def swiglu_hidden(d_model: int, expansion: int, multiple: int = 128) -> int:
    """2/3-reduced gated width, rounded to the nearest multiple (at least one)."""
    n = math.ceil(2 * expansion * d_model / 3)
    return max(multiple, multiple * round(n / multiple))


@dataclass(frozen=True)
class MLPConfig:
    d_model: int
    expansion: int = 4
    activation: str = "gelu"
    hidden: int = 0  # 0 = derive from expansion

    def __post_init__(self):
        if self.activation not in ("gelu", "swiglu"):
            raise ValueError(f"activation must be 'gelu' or 'swiglu', got {self.activation!r}")

    @property
    def hidden_dim(self) -> int:
        if self.hidden > 0:
            return self.hidden
        if self.activation == "gelu":
            return self.expansion * self.d_model
        return swiglu_hidden(self.d_model, self.expansion)


@dataclass
class MLPParams:
    w1: Tensor
    w2: Tensor
    w3: Optional[Tensor] = None  # swiglu only

    @classmethod
    def init(cls, cfg: MLPConfig, rng: np.random.Generator,
             n_layers: int = 1, dtype=np.float64) -> "MLPParams":
        D, h = cfg.d_model, cfg.hidden_dim
        std = 0.02
        out_std = std / math.sqrt(2 * n_layers)

        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)

        if cfg.activation == "gelu":
            return cls(w1=t(rng.normal(0, std, size=(D, h))),
                       w2=t(rng.normal(0, out_std, size=(h, D))))
        return cls(w1=t(rng.normal(0, std, size=(D, h))),
                   w2=t(rng.normal(0, std, size=(D, h))),
                   w3=t(rng.normal(0, out_std, size=(h, D))))

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"w1": self.w1, "w2": self.w2}
        if self.w3 is not None:
            named["w3"] = self.w3
        return named


def mlp_forward(cfg: MLPConfig, params: MLPParams, x: Tensor) -> Tensor:
    if cfg.activation == "gelu":
        return matmul(gelu(matmul(x, params.w1)), params.w2)
    return matmul(silu(matmul(x, params.w1)) * matmul(x, params.w2), params.w3)
