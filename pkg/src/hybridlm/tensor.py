"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float64 for verification, float32 for
training). Gradients are produced by recording executed operations on an
explicit :class:`Tape` and replaying their vector-Jacobian products in
reverse. The op set is exactly what the sequence layers need: matmul/einsum
contractions, a depthwise causal convolution, normalization, the usual
pointwise activations, softmax, cross entropy, and a handful of structural
ops (reshape/transpose/slice/pad/concat/cumsum/embedding lookup).

Design notes:
  * A tape must be explicitly active (``with Tape():``) for anything to be
    recorded; inference runs tape-free with zero bookkeeping.
  * Operations are differentiable w.r.t. every Tensor input; python scalars
    and raw numpy arrays are treated as constants.
  * ``set_check_finite(True)`` makes every published op assert that its
    output is finite (NaN/Inf raises FloatingPointError). Off by default;
    the trainer checks the loss instead.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "einsum",
    "causal_conv1d",
    "normalize",
    "pointwise",
    "softmax_rows",
    "cross_entropy",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "silu",
    "gelu",
    "softplus",
    "concat",
    "pad_axis",
    "cumsum",
    "embedding_lookup",
    "set_check_finite",
    "get_check_finite",
]

_CHECK_FINITE = os.environ.get("HYBRIDLM_CHECK_FINITE", "") not in ("", "0")


def set_check_finite(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def get_check_finite() -> bool:
    return _CHECK_FINITE


_TAPE_STACK: list["Tape"] = []


@dataclass
class TapeEntry:
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of executed operations for one computation graph.

    Entries are appended in execution order, which is a topological order by
    construction: an operation can only consume tensors that already exist.
    ``backward`` walks the record once, in reverse.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, output: "Tensor", inputs: tuple["Tensor", ...], vjp) -> None:
        self.entries.append(TapeEntry(output, inputs, vjp))

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(input) into ``.grad`` of every recorded tensor."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not any(e.output is loss for e in self.entries):
            raise ValueError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            g = entry.output.grad
            if g is None:
                continue  # not on any path to the loss
            partials = entry.vjp(g)
            for inp, p in zip(entry.inputs, partials):
                if p is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = p
                else:
                    inp.grad = inp.grad + p


def backward(tape: Tape, loss: "Tensor") -> None:
    tape.backward(loss)


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    # -- inspection ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, _reciprocal(other))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(_reciprocal(self), other)

    def __pow__(self, k):
        return _powc(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- reductions / shape ---------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _transpose(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Create an op output, recording it when a tape is active."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor operation")
    tape = _active_tape()
    out = Tensor(data)
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _raw(x):
    """Value used in arithmetic: python scalars stay scalars (keeps float32)."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, (int, float)):
        return x
    return np.asarray(x)


def add(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    a, b = _as_tensor(a), _as_tensor(b)
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (
            _unbroadcast(g, a.data.shape) if need_a else None,
            _unbroadcast(g, b.data.shape) if need_b else None,
        )

    return _make(np.asarray(av + bv), (a, b), vjp)


def mul(a, b) -> Tensor:
    av, bv = _raw(a), _raw(b)
    a, b = _as_tensor(a), _as_tensor(b)
    need_a, need_b = a.requires_grad, b.requires_grad
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        )

    return _make(np.asarray(av * bv), (a, b), vjp)


def _reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data

    def vjp(g):
        return (-g * out * out,)

    return _make(out, (x,), vjp)


def _powc(x: Tensor, k) -> Tensor:
    k = float(k)
    xd = x.data

    def vjp(g):
        return (g * k * xd ** (k - 1.0),)

    return _make(xd ** k, (x,), vjp)


# ---------------------------------------------------------------------------
# matmul / einsum
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (both operands >= 2-D)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = gb = None
        if need_a:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if need_b:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return (ga, gb)

    return _make(np.matmul(ad, bd), (a, b), vjp)


def einsum(equation: str, *operands) -> Tensor:
    """Einstein-summation contraction.

    Restricted to plain contractions so the backward pass is another einsum:
    no repeated subscript within one operand, no ellipsis, and every input
    subscript must appear in the output or in another operand.
    """
    if "->" not in equation or "..." in equation:
        raise ValueError("einsum requires an explicit '->' and no ellipsis")
    lhs, out_sub = equation.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError("operand count does not match equation")
    for i, sub in enumerate(in_subs):
        if len(set(sub)) != len(sub):
            raise ValueError(f"repeated subscript in operand {i}: {sub!r}")
        others = set(out_sub) | set("".join(s for j, s in enumerate(in_subs) if j != i))
        missing = set(sub) - others
        if missing:
            raise ValueError(
                f"subscripts {sorted(missing)} of operand {i} appear nowhere else; "
                "use an explicit sum instead"
            )
    tensors = tuple(_as_tensor(op) for op in operands)
    datas = [t.data for t in tensors]
    needs = [t.requires_grad for t in tensors]

    def vjp(g):
        grads = []
        for i, sub in enumerate(in_subs):
            if not needs[i]:
                grads.append(None)
                continue
            parts = [out_sub] + [s for j, s in enumerate(in_subs) if j != i]
            ops = [g] + [d for j, d in enumerate(datas) if j != i]
            eq = ",".join(parts) + "->" + sub
            grads.append(np.einsum(eq, *ops, optimize=True))
        return grads

    return _make(np.einsum(equation, *datas, optimize=True), tensors, vjp)


# ---------------------------------------------------------------------------
# causal depthwise convolution
# ---------------------------------------------------------------------------

def causal_conv1d(x, weights, bias) -> Tensor:
    """Depthwise causal conv: out[..., t, c] = b[c] + sum_j w[j, c] x[..., t-W+1+j, c].

    Positions before the sequence start are treated as zeros, so position t
    sees inputs t-W+1..t only.
    """
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if x.ndim < 2:
        raise ValueError("causal_conv1d input must be (..., L, C)")
    W, C = weights.shape
    if W < 1:
        raise ValueError("kernel width must be >= 1")
    if x.shape[-1] != C or bias.shape != (C,):
        raise ValueError(
            f"channel mismatch: x has {x.shape[-1]}, weights {C}, bias {bias.shape}"
        )
    L = x.shape[-2]
    xd, wd, bd = x.data, weights.data, bias.data
    pad = [(0, 0)] * (xd.ndim - 2) + [(W - 1, 0), (0, 0)]
    xp = np.pad(xd, pad)
    out = np.broadcast_to(bd, xd.shape).astype(xd.dtype, copy=True)
    for j in range(W):
        out += wd[j] * xp[..., j:j + L, :]
    need_x, need_w, need_b = x.requires_grad, weights.requires_grad, bias.requires_grad

    def vjp(g):
        gx = gw = gb = None
        if need_x:
            gpad = [(0, 0)] * (g.ndim - 2) + [(0, W - 1), (0, 0)]
            gp = np.pad(g, gpad)
            gx = np.zeros_like(xd)
            for j in range(W):
                gx += wd[j] * gp[..., W - 1 - j:W - 1 - j + L, :]
        if need_w:
            gw = np.empty_like(wd)
            for j in range(W):
                gw[j] = (g * xp[..., j:j + L, :]).reshape(-1, C).sum(axis=0)
        if need_b:
            gb = g.reshape(-1, C).sum(axis=0)
        return (gx, gw, gb)

    return _make(out, (x, weights, bias), vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(x, kind: str, gain, bias=None, eps: float = 1e-5, groups: int = 1) -> Tensor:
    """Normalize the trailing channel axis.

    kind: "layernorm" (mean/std), "rmsnorm" (rms, no centering),
    "groupnorm" (layernorm statistics within each of ``groups`` contiguous
    channel groups), or "grouprms" (rms statistics within groups). Gain and
    optional bias are per-channel and applied after. groupnorm with one
    group runs the identical code path as layernorm.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gain = _as_tensor(x), _as_tensor(gain)
    bias_t = _as_tensor(bias) if bias is not None else None
    C = x.shape[-1]
    if gain.shape != (C,):
        raise ValueError(f"gain shape {gain.shape} does not match channels {C}")
    if kind in ("layernorm", "rmsnorm"):
        g = 1
        center = kind == "layernorm"
    elif kind in ("groupnorm", "grouprms"):
        g = int(groups)
        if C % g != 0:
            raise ValueError(f"channels {C} not divisible by groups {g}")
        center = kind == "groupnorm"
    else:
        raise ValueError(f"unknown normalization kind: {kind!r}")

    xd = x.data
    grouped = xd.reshape(xd.shape[:-1] + (g, C // g))
    if center:
        mu = grouped.mean(axis=-1, keepdims=True)
        cen = grouped - mu
    else:
        cen = grouped
    inv = 1.0 / np.sqrt((cen * cen).mean(axis=-1, keepdims=True) + eps)
    xhat_g = cen * inv
    xhat = xhat_g.reshape(xd.shape)
    out = xhat * gain.data
    if bias_t is not None:
        out = out + bias_t.data

    need_x, need_gain = x.requires_grad, gain.requires_grad
    need_bias = bias_t is not None and bias_t.requires_grad
    n = C // g

    def vjp(grad):
        gx = ggain = gbias = None
        if need_x:
            u = (grad * gain.data).reshape(grouped.shape)
            # d xhat/dx within each group; standard (layer|rms)norm backward
            dot = (u * xhat_g).mean(axis=-1, keepdims=True)
            gxg = inv * (u - xhat_g * dot)
            if center:
                gxg = gxg - gxg.mean(axis=-1, keepdims=True)
            gx = gxg.reshape(xd.shape)
        if need_gain:
            ggain = (grad * xhat).reshape(-1, C).sum(axis=0)
        if need_bias:
            gbias = grad.reshape(-1, C).sum(axis=0)
        return (gx, ggain, gbias) if bias_t is not None else (gx, ggain)

    inputs = (x, gain) if bias_t is None else (x, gain, bias_t)
    return _make(out, inputs, vjp)


# ---------------------------------------------------------------------------
# pointwise activations
# ---------------------------------------------------------------------------

def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (x,), vjp)


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data

    def vjp(g):
        return (g / xd,)

    return _make(np.log(xd), (x,), vjp)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)

    def vjp(g):
        return (g / (2.0 * out),)

    return _make(out, (x,), vjp)


def _sigmoid_raw(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _sigmoid_raw(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), vjp)


def silu(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    s = _sigmoid_raw(xd)

    def vjp(g):
        return (g * (s + xd * s * (1.0 - s)),)

    return _make(xd * s, (x,), vjp)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact erf-based GELU: x * Phi(x)."""
    x = _as_tensor(x)
    xd = x.data
    phi = 0.5 * (1.0 + _erf(xd * _INV_SQRT2))

    def vjp(g):
        dens = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (phi + xd * dens),)

    return _make((xd * phi).astype(xd.dtype, copy=False), (x,), vjp)


def softplus(x) -> Tensor:
    """log(1 + e^x), computed stably for large |x|."""
    x = _as_tensor(x)
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    s = _sigmoid_raw(xd)

    def vjp(g):
        return (g * s,)

    return _make(out, (x,), vjp)


_POINTWISE = {"silu": silu, "gelu": gelu, "softplus": softplus, "exp": exp, "sigmoid": sigmoid}


def pointwise(x, fn: str) -> Tensor:
    """Dispatch to one of the named elementwise activations."""
    try:
        f = _POINTWISE[fn]
    except KeyError:
        raise ValueError(f"unknown pointwise function: {fn!r}") from None
    return f(x)


# ---------------------------------------------------------------------------
# softmax / cross entropy
# ---------------------------------------------------------------------------

def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _as_tensor(x)
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), vjp)


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-softmax probability of targets over kept positions.

    ``targets`` is an integer array shaped like logits minus the final
    (vocabulary) axis; entries equal to ``ignore_index`` contribute neither
    loss nor gradient. With every position ignored the loss is 0.
    """
    logits = _as_tensor(logits)
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    V = logits.shape[-1]
    keep = t != ignore_index
    if ((t < 0) & keep).any() or (t >= V).any():
        raise ValueError("target id out of range")
    xd = logits.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    n = int(keep.sum())
    safe_t = np.where(keep, t, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / n if n > 0 else np.asarray(0.0, dtype=xd.dtype)

    def vjp(g):
        if n == 0:
            return (np.zeros_like(xd),)
        p = np.exp(logp)
        grad = p * keep[..., None]
        np.subtract.at(grad, (*np.nonzero(keep), t[keep]), 1.0)
        return ((float(g) / n) * grad,)

    return _make(np.asarray(loss, dtype=xd.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def _sum(x: Tensor, axis, keepdims) -> Tensor:
    xd = x.data

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xd.shape).copy() if not keepdims else np.broadcast_to(g, xd.shape).copy(),)
        gq = g
        if not keepdims:
            gq = np.expand_dims(g, axis)
        return (np.broadcast_to(gq, xd.shape).copy(),)

    return _make(xd.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def _mean(x: Tensor, axis, keepdims) -> Tensor:
    xd = x.data
    if axis is None:
        count = xd.size
    else:
        count = xd.shape[axis] if isinstance(axis, int) else int(np.prod([xd.shape[a] for a in axis]))

    def vjp(g):
        gq = g
        if axis is not None and not keepdims:
            gq = np.expand_dims(g, axis)
        return (np.broadcast_to(gq, xd.shape) / count,)

    return _make(xd.mean(axis=axis, keepdims=keepdims), (x,), vjp)


def _reshape(x: Tensor, shape) -> Tensor:
    xd = x.data

    def vjp(g):
        return (g.reshape(xd.shape),)

    return _make(xd.reshape(shape), (x,), vjp)


def _transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), vjp)


def _getitem(x: Tensor, idx) -> Tensor:
    xd = x.data

    def vjp(g):
        gx = np.zeros_like(xd)
        gx[idx] += g
        return (gx,)

    return _make(xd[idx], (x,), vjp)


def pad_axis(x, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    x = _as_tensor(x)
    xd = x.data
    ax = axis % xd.ndim
    widths = [(0, 0)] * xd.ndim
    widths[ax] = (before, after)
    L = xd.shape[ax]

    def vjp(g):
        sl = [slice(None)] * xd.ndim
        sl[ax] = slice(before, before + L)
        return (g[tuple(sl)],)

    return _make(np.pad(xd, widths), (x,), vjp)


def concat(tensors, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in ts]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad for t in ts]

    def vjp(g):
        out = []
        for i in range(len(ts)):
            if not needs[i]:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate(datas, axis=axis), tuple(ts), vjp)


def cumsum(x, axis: int) -> Tensor:
    x = _as_tensor(x)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), vjp)


def embedding_lookup(table, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    td = table.data

    def vjp(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        return (gt,)

    return _make(td[ids], (table,), vjp)
