"""Analytical cost accounting: parameters, FLOPs, MFU, decode latency.

Everything here is closed-form over a HybridModelConfig; nothing executes
the model. Parameter counts are exact (they must equal the built model's
element count), FLOPs use the standard 6*N-per-token estimate plus the
attention quadratic term, and decode latency is a bandwidth-bound model:

    latency = (weight bytes + sum of per-layer cache bytes) / bandwidth + overhead

KV caches grow linearly in context length; SSM caches are constant. That
asymmetry is the entire decode-speedup story.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import HybridModelConfig

__all__ = [
    "HardwareSpec",
    "CostReport",
    "ALLREDUCE_PER_LAYER",
    "layer_params",
    "count_params",
    "matmul_params",
    "forward_flops_per_token",
    "training_flops_per_token",
    "mfu",
    "iter_time_for_mfu",
    "kv_bytes_per_token",
    "cache_bytes_per_layer",
    "decode_bytes",
    "decode_latency",
    "speedup",
    "allreduce_count",
    "cost_report",
]

# all-reduces per layer per forward under tensor parallelism: the original
# selective-SSM block needs one for x_proj's gather and one for out_proj,
# every other layer kind reduces once at its output projection
ALLREDUCE_PER_LAYER = {"M": 1, "1": 2, "*": 1, "+": 1}


@dataclass(frozen=True)
class HardwareSpec:
    """Calibration constants for the analytical model, not measurements."""

    peak_flops: float = 9.89e14
    mem_bandwidth: float = 3.35e12
    bytes_per_weight: int = 2
    bytes_per_cache_element: int = 2
    overhead_s: float = 1e-5  # fixed per-token launch/sync cost

    def __post_init__(self):
        for name in ("peak_flops", "mem_bandwidth", "bytes_per_weight",
                     "bytes_per_cache_element", "overhead_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def layer_params(kind: str, config: HybridModelConfig) -> int:
    """Exact parameter count of one layer, pre-norm gain included."""
    D = config.d_model
    if kind == "M":
        m2 = config.mamba2_config
        di, gn, H = m2.d_inner, m2.n_groups * m2.d_state, m2.n_heads
        return (D * (2 * di + 2 * gn + H)              # in_proj
                + m2.conv_width * m2.conv_dim + m2.conv_dim  # conv
                + 3 * H                                # a_log, dt_bias, skip
                + di                                   # norm gain
                + di * D                               # out_proj
                + D)                                   # pre-norm gain
    if kind == "1":
        m1 = config.mamba1_config
        di, N, R = m1.d_inner, m1.d_state, m1.dt_rank
        return (D * 2 * di
                + m1.conv_width * di + di
                + di * (R + 2 * N)                     # x_proj
                + R * di + di                          # dt_proj, dt_bias
                + di * N                               # a_log
                + di                                   # skip
                + di * D
                + D)
    if kind == "*":
        attn = config.attention_config
        qo = attn.n_heads * attn.head_dim
        kv = attn.n_kv_groups * attn.head_dim
        return 2 * D * qo + 2 * D * kv + D
    if kind == "+":
        mlp = config.mlp_config
        mats = 2 if mlp.activation == "gelu" else 3
        return mats * D * mlp.hidden_dim + D
    raise ValueError(f"unknown layer kind {kind!r}")


def count_params(config: HybridModelConfig) -> int:
    """Exactly the element count of the built model's tensors."""
    D, V = config.d_model, config.vocab_size
    total = V * D + D  # embedding + final norm gain
    if not config.tied:
        total += D * V
    for kind in config.pattern:
        total += layer_params(kind, config)
    return total


def _layer_matmul_params(kind: str, config: HybridModelConfig) -> int:
    """Parameters that multiply activations (norm gains and scalar vectors
    are excluded; conv weights included, their FLOPs are 2 per element)."""
    D = config.d_model
    if kind == "M":
        m2 = config.mamba2_config
        di, gn, H = m2.d_inner, m2.n_groups * m2.d_state, m2.n_heads
        return D * (2 * di + 2 * gn + H) + m2.conv_width * m2.conv_dim + di * D
    if kind == "1":
        m1 = config.mamba1_config
        di, N, R = m1.d_inner, m1.d_state, m1.dt_rank
        return D * 2 * di + m1.conv_width * di + di * (R + 2 * N) + R * di + di * D
    if kind == "*":
        attn = config.attention_config
        return 2 * D * attn.n_heads * attn.head_dim + 2 * D * attn.n_kv_groups * attn.head_dim
    mlp = config.mlp_config
    return (2 if mlp.activation == "gelu" else 3) * D * mlp.hidden_dim


def matmul_params(config: HybridModelConfig) -> int:
    """Includes the output-logit matrix whether or not it is tied."""
    total = config.d_model * config.vocab_size
    for kind in config.pattern:
        total += _layer_matmul_params(kind, config)
    return total


def forward_flops_per_token(config: HybridModelConfig, context_len: int) -> float:
    """2 FLOPs per matmul parameter plus 4*L*D per attention layer."""
    n_attn = config.pattern.count("*")
    return 2.0 * matmul_params(config) + 4.0 * context_len * config.d_model * n_attn


def training_flops_per_token(config: HybridModelConfig, context_len: int) -> float:
    """Forward plus backward: 6*N + 12*L*D per attention layer."""
    return 3.0 * forward_flops_per_token(config, context_len)


def mfu(config: HybridModelConfig, tokens_per_iter: float, iter_time_s: float,
        hardware: HardwareSpec, context_len: int | None = None) -> float:
    """Model FLOP/s over peak FLOP/s."""
    if tokens_per_iter <= 0 or iter_time_s <= 0:
        raise ValueError("tokens_per_iter and iter_time_s must be positive")
    L = config.max_seq_len if context_len is None else context_len
    achieved = training_flops_per_token(config, L) * tokens_per_iter / iter_time_s
    return achieved / hardware.peak_flops


def iter_time_for_mfu(config: HybridModelConfig, tokens_per_iter: float,
                      target_mfu: float, hardware: HardwareSpec,
                      context_len: int | None = None) -> float:
    """Iteration time at which mfu() would report target_mfu."""
    if target_mfu <= 0:
        raise ValueError("target_mfu must be positive")
    L = config.max_seq_len if context_len is None else context_len
    flops = training_flops_per_token(config, L) * tokens_per_iter
    return flops / (target_mfu * hardware.peak_flops)


def kv_bytes_per_token(config: HybridModelConfig, hardware: HardwareSpec,
                       batch: int = 1) -> int:
    """Cache growth per generated token: K and V rows for every attention layer."""
    attn = config.attention_config
    per_layer = 2 * attn.n_kv_groups * attn.head_dim * hardware.bytes_per_cache_element
    return per_layer * config.pattern.count("*") * batch


def cache_bytes_per_layer(kind: str, config: HybridModelConfig, context_len: int,
                          batch: int, hardware: HardwareSpec) -> int:
    b = hardware.bytes_per_cache_element
    if kind == "*":
        attn = config.attention_config
        return 2 * attn.n_kv_groups * attn.head_dim * context_len * b * batch
    if kind == "M":
        m2 = config.mamba2_config
        state = m2.n_heads * m2.d_state * m2.head_dim
        conv = (m2.conv_width - 1) * m2.conv_dim
        return (state + conv) * b * batch
    if kind == "1":
        m1 = config.mamba1_config
        return (m1.d_inner * m1.d_state + (m1.conv_width - 1) * m1.d_inner) * b * batch
    if kind == "+":
        return 0
    raise ValueError(f"unknown layer kind {kind!r}")


def decode_bytes(config: HybridModelConfig, context_len: int, batch: int,
                 hardware: HardwareSpec) -> int:
    """Bytes touched to emit one token at the given context length."""
    total = count_params(config) * hardware.bytes_per_weight
    for kind in config.pattern:
        total += cache_bytes_per_layer(kind, config, context_len, batch, hardware)
    return total


def decode_latency(config: HybridModelConfig, context_len: int, batch: int,
                   hardware: HardwareSpec) -> float:
    if context_len < 0:
        raise ValueError("context_len must be >= 0")
    return decode_bytes(config, context_len, batch, hardware) / hardware.mem_bandwidth \
        + hardware.overhead_s


def speedup(slow_config: HybridModelConfig, fast_config: HybridModelConfig,
            context_len: int, hardware: HardwareSpec, batch: int = 1) -> float:
    """Per-token latency ratio slow/fast at equal context length."""
    return decode_latency(slow_config, context_len, batch, hardware) \
        / decode_latency(fast_config, context_len, batch, hardware)


def allreduce_count(pattern: str, tp_degree: int) -> int:
    """Communication rounds per forward pass under tensor parallelism."""
    if tp_degree < 1:
        raise ValueError("tp_degree must be >= 1")
    if tp_degree == 1:
        return 0
    try:
        return sum(ALLREDUCE_PER_LAYER[kind] for kind in pattern)
    except KeyError as e:
        raise ValueError(f"unknown layer kind {e.args[0]!r}") from None


@dataclass
class CostReport:
    """All the accounting for one config at one operating point.

    Invariant: total_params = embed + head + final_norm
    + sum over kinds of layer_count * layer_params_each.
    """

    total_params: int
    embed_params: int
    head_params: int
    final_norm_params: int
    layer_counts: dict = field(default_factory=dict)
    layer_params_each: dict = field(default_factory=dict)
    flops_per_token_fwd: float = 0.0
    flops_per_token_train: float = 0.0
    decode_bytes: int = 0
    decode_latency_s: float = 0.0
    allreduce_per_layer: dict = field(default_factory=dict)
    allreduce_per_forward: int = 0
    context_len: int = 0
    batch: int = 1
    tp_degree: int = 1
    mfu: float | None = None


def cost_report(config: HybridModelConfig, hardware: HardwareSpec | None = None,
                context_len: int = 0, batch: int = 1, tp_degree: int = 1,
                tokens_per_iter: float | None = None,
                iter_time_s: float | None = None) -> CostReport:
    hw = hardware or HardwareSpec()
    D, V = config.d_model, config.vocab_size
    kinds = sorted(set(config.pattern), key="M1*+".index)
    report = CostReport(
        total_params=count_params(config),
        embed_params=V * D,
        head_params=0 if config.tied else D * V,
        final_norm_params=D,
        layer_counts={k: config.pattern.count(k) for k in kinds},
        layer_params_each={k: layer_params(k, config) for k in kinds},
        flops_per_token_fwd=forward_flops_per_token(config, context_len),
        flops_per_token_train=training_flops_per_token(config, context_len),
        decode_bytes=decode_bytes(config, context_len, batch, hw),
        decode_latency_s=decode_latency(config, context_len, batch, hw),
        allreduce_per_layer={k: ALLREDUCE_PER_LAYER[k] for k in kinds},
        allreduce_per_forward=allreduce_count(config.pattern, tp_degree),
        context_len=context_len,
        batch=batch,
        tp_degree=tp_degree,
    )
    if tokens_per_iter is not None and iter_time_s is not None:
        report.mfu = mfu(config, tokens_per_iter, iter_time_s, hw,
                         context_len=context_len if context_len > 0 else None)
    return report
