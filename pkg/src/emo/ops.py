"""Forward primitives and their vector-Jacobian products.

Everything here is a pure function over ndarrays. Convolution, matrix
product, softmax, the two normalizations, and the two activations each come
with a hand-written VJP; composition of primitives into blocks (with tape
recording) lives in autograd.py.

In 32-bit mode all dot products accumulate in 64-bit (operands are upcast
for the contraction and the result is cast back), so f32 results track the
f64 oracle closely.

A cost meter can be installed with `cost_meter()`; while active, every
primitive reports its multiply-accumulate count and the auxiliary
element-wise work (bias adds, normalization, activation, softmax) of the
calls it executes.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor

# ---------------------------------------------------------------------------
# cost metering


@dataclass
class CostMeter:
    macs: int = 0                # contraction multiply-accumulates
    softmax_elems: int = 0       # attention-matrix entries normalized
    bias_adds: int = 0
    norm_elems: int = 0
    act_elems: int = 0
    other_adds: int = 0          # residual adds, pooling sums

    @property
    def flops(self) -> int:
        """2x MACs plus 3 flops per softmax element (exp, subtract, divide)."""
        return 2 * self.macs + 3 * self.softmax_elems

    @property
    def macs_total(self) -> float:
        """MAC-equivalents including softmax at 1.5 per element; exact halves."""
        return self.flops / 2


_METER: contextvars.ContextVar[CostMeter | None] = contextvars.ContextVar("emo_cost_meter", default=None)


@contextlib.contextmanager
def cost_meter():
    """Context manager that counts the work of every primitive call inside."""
    meter = CostMeter()
    token = _METER.set(meter)
    try:
        yield meter
    finally:
        _METER.reset(token)


def _meter(**counts):
    m = _METER.get()
    if m is not None:
        for k, v in counts.items():
            setattr(m, k, getattr(m, k) + int(v))


# ---------------------------------------------------------------------------
# helpers


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract of a 2-D grouped convolution (cross-correlation)."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv output would be empty for input {h}x{w} with {self}")
        return ho, wo

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def macs(self, h: int, w: int, batch: int = 1) -> int:
        ho, wo = self.out_hw(h, w)
        return batch * (self.out_channels * (self.in_channels // self.groups) * self.kernel ** 2) * ho * wo

    def param_count(self) -> int:
        n = self.out_channels * (self.in_channels // self.groups) * self.kernel ** 2
        return n + (self.out_channels if self.bias else 0)


def conv2d(x, w, spec: ConvSpec, b=None) -> np.ndarray:
    """Grouped 2-D cross-correlation with zero padding.

    x: (N, C_in, H, W); w: (C_out, C_in/G, k, k); b: (C_out,) or None.
    """
    x, w = _arr(x), _arr(w)
    n, c, h, wdt = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape():
        raise ValueError(f"weights shaped {w.shape}, spec expects {spec.weight_shape()}")
    if (b is None) == spec.bias:
        raise ValueError("bias presence must match spec.bias")
    k, s, p, g = spec.kernel, spec.stride, spec.padding, spec.groups
    ho, wo = spec.out_hw(h, wdt)
    out_dtype = x.dtype
    acc = np.float64  # 64-bit accumulation in both precisions

    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    # patches: (N, C_in, Ho, Wo, k, k)
    patches = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    cig, cog = spec.in_channels // g, spec.out_channels // g
    # (N, g, Ho*Wo, cig*k*k) x (g, cig*k*k, cog) -> (N, g, Ho*Wo, cog)
    pm = patches.reshape(n, g, cig, ho, wo, k, k).transpose(0, 1, 3, 4, 2, 5, 6)
    pm = pm.reshape(n, g, ho * wo, cig * k * k).astype(acc, copy=False)
    wm = w.reshape(g, cog, cig * k * k).transpose(0, 2, 1).astype(acc, copy=False)
    y = np.matmul(pm, wm)  # (N, g, Ho*Wo, cog)
    y = y.transpose(0, 1, 3, 2).reshape(n, spec.out_channels, ho, wo)
    _meter(macs=spec.macs(h, wdt, batch=n))
    if b is not None:
        y = y + np.asarray(b, dtype=acc).reshape(1, -1, 1, 1)
        _meter(bias_adds=n * spec.out_channels * ho * wo)
    return y.astype(out_dtype, copy=False)


def conv2d_vjp(g_out, x, w, spec: ConvSpec):
    """Gradients of sum(g_out * conv2d(x, w, spec, b)) w.r.t. (x, w, b)."""
    g_out, x, w = _arr(g_out), _arr(x), _arr(w)
    n, c, h, wdt = x.shape
    k, s, p, grp = spec.kernel, spec.stride, spec.padding, spec.groups
    ho, wo = spec.out_hw(h, wdt)
    if g_out.shape != (n, spec.out_channels, ho, wo):
        raise ValueError(f"upstream shaped {g_out.shape}, expected {(n, spec.out_channels, ho, wo)}")
    acc = np.float64
    cig, cog = spec.in_channels // grp, spec.out_channels // grp

    gb = g_out.sum(axis=(0, 2, 3)).astype(x.dtype, copy=False) if spec.bias else None

    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    patches = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    pg = patches.reshape(n, grp, cig, ho, wo, k, k).astype(acc, copy=False)
    gg = g_out.reshape(n, grp, cog, ho, wo).astype(acc, copy=False)
    gw = np.einsum("ngchwij,ngohw->gocij", pg, gg, optimize=True)
    gw = gw.reshape(spec.weight_shape()).astype(x.dtype, copy=False)

    wg = w.reshape(grp, cog, cig, k, k).astype(acc, copy=False)
    gxp = np.zeros((n, c, h + 2 * p, wdt + 2 * p), dtype=acc)
    gxv = gxp.reshape(n, grp, cig, h + 2 * p, wdt + 2 * p)
    for i in range(k):
        for j in range(k):
            # contribution of kernel tap (i, j): scatter over strided slabs
            contrib = np.einsum("ngohw,goc->ngchw", gg, wg[:, :, :, i, j], optimize=True)
            gxv[:, :, :, i : i + s * ho : s, j : j + s * wo : s] += contrib
    gx = gxp[:, :, p : p + h, p : p + wdt] if p else gxp
    return gx.astype(x.dtype, copy=False), gw, gb


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b) -> np.ndarray:
    """Batched matrix product (..., m, n) @ (..., n, p) with 64-bit accumulation."""
    a, b = _arr(a), _arr(b)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a, b)
    y = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    batch = int(np.prod(y.shape[:-2])) if y.ndim > 2 else 1
    _meter(macs=batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return y.astype(out_dtype, copy=False)


def matmul_vjp(g, a, b):
    """grad_a = g @ b^T, grad_b = a^T @ g (broadcast batch dims reduced)."""
    g, a, b = _arr(g), _arr(a), _arr(b)
    ga = np.matmul(g.astype(np.float64, copy=False), np.swapaxes(b, -1, -2).astype(np.float64, copy=False))
    gb = np.matmul(np.swapaxes(a, -1, -2).astype(np.float64, copy=False), g.astype(np.float64, copy=False))
    ga = _unbroadcast(ga, a.shape).astype(a.dtype, copy=False)
    gb = _unbroadcast(gb, b.shape).astype(b.dtype, copy=False)
    return ga, gb


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# softmax


def softmax_lastdim(x) -> np.ndarray:
    """Numerically stable softmax over the trailing axis."""
    x = _arr(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    _meter(softmax_elems=x.size)
    return y


def softmax_lastdim_vjp(g, y):
    """VJP from the softmax output y: dx = (g - sum(g*y)) * y."""
    g, y = _arr(g), _arr(y)
    dot = (g * y).sum(axis=-1, keepdims=True)
    return (g - dot) * y


# ---------------------------------------------------------------------------
# normalization


def batchnorm_inference(x, gamma, beta, mean, var, eps: float = 1e-5) -> np.ndarray:
    """Per-channel affine normalization with stored running statistics.

    There is no training mode in this library; the statistics are inputs.
    """
    x = _arr(x)
    var = np.asarray(var)
    if np.any(var <= 0):
        raise ValueError("batchnorm running variance must be positive")
    scale = (np.asarray(gamma) / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
    shift = (np.asarray(beta) - np.asarray(mean) * scale.reshape(-1)).reshape(1, -1, 1, 1)
    _meter(norm_elems=x.size)
    return (x * scale + shift).astype(x.dtype, copy=False)


def batchnorm_inference_vjp(g, x, gamma, beta, mean, var, eps: float = 1e-5):
    g, x = _arr(g), _arr(x)
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    scale = (np.asarray(gamma) * inv).reshape(1, -1, 1, 1)
    gx = g * scale
    xhat = (x - np.asarray(mean).reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    return gx.astype(x.dtype, copy=False), ggamma.astype(x.dtype, copy=False), gbeta.astype(x.dtype, copy=False)


def layernorm_channels(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Layer normalization over the channel axis, per spatial position."""
    x = _arr(x)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    _meter(norm_elems=x.size)
    y = xhat * np.asarray(gamma).reshape(1, -1, 1, 1) + np.asarray(beta).reshape(1, -1, 1, 1)
    return y.astype(x.dtype, copy=False)


def layernorm_channels_vjp(g, x, gamma, beta, eps: float = 1e-5):
    g, x = _arr(g), _arr(x)
    c = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gam = np.asarray(gamma).reshape(1, -1, 1, 1)
    gxhat = g * gam
    # standard layernorm backward over the normalized axis
    gx = inv * (gxhat - gxhat.mean(axis=1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=1, keepdims=True))
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    return gx.astype(x.dtype, copy=False), ggamma.astype(x.dtype, copy=False), gbeta.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> np.ndarray:
    """x * sigmoid(x)."""
    x = _arr(x)
    _meter(act_elems=x.size)
    return x * _sigmoid(x)


def silu_vjp(g, x):
    g, x = _arr(g), _arr(x)
    s = _sigmoid(x)
    return g * (s * (1.0 + x * (1.0 - s)))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> np.ndarray:
    """Exact Gaussian-CDF GeLU: x * Phi(x)."""
    x = _arr(x)
    _meter(act_elems=x.size)
    return (x * 0.5 * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_vjp(g, x):
    g, x = _arr(g), _arr(x)
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (g * (phi + x * pdf)).astype(x.dtype, copy=False)


def activate(x, kind: str) -> np.ndarray:
    if kind == "silu":
        return silu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def normalize(x, kind: str, **params) -> np.ndarray:
    if kind == "batchnorm-inference":
        return batchnorm_inference(x, **params)
    if kind == "layernorm":
        return layernorm_channels(x, **params)
    raise ValueError(f"unknown normalization {kind!r}")
