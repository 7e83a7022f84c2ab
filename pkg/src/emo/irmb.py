"""Inverted residual mobile block with expanded-window attention.

The block is: expansion stage (plain MLP, or EW-MHSA where the attention
matrix computed from the *unexpanded* input multiplies either the raw
features before the expansion MLP - `attn_pre_expand`, cheaper - or the
expanded values after it), then depth-wise conv with an inner skip at the
expanded width (stride lives here), then the shrink MLP and the outer
residual.

Two switches (`enable_attn`, `enable_conv`) select the operator: both off
degenerates to a pure MLP block, conv only is an IRB, attention only is a
windowed transformer block, both on is the full cascade.

The two multiplication orders provably coincide when the expansion MLP's
group count equals the head count (`orders_equivalent`); `equivalence_check`
measures this on seeded random weights, including the generic failure when
groups != heads.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as T
from .attention import attention_weights, key_padding_bias, mix_values, window_merge, window_partition
from .ops import ConvSpec
from .tensor import Rng, dtype_of

_NORMS = ("auto", "none", "batchnorm", "layernorm")
_ACTS = ("auto", "none", "silu", "gelu")


def default_heads(in_channels: int, mid_channels: int, head_dim: int = 32) -> int:
    """Largest head count <= in_channels/head_dim dividing both widths."""
    for h in range(max(1, in_channels // head_dim), 0, -1):
        if in_channels % h == 0 and mid_channels % h == 0:
            return h
    return 1


@dataclass(frozen=True)
class IRMBConfig:
    in_channels: int
    out_channels: int
    expansion_ratio: float = 4.0
    kernel: int = 3
    window: int = 7
    heads: int | None = None          # None: head_dim-32 rule via default_heads
    stride: int = 1
    enable_attn: bool = True
    enable_conv: bool = True
    attn_first: bool = True
    attn_pre_expand: bool = True
    expand_groups: int = 1
    mid_channels: int | None = None   # None: round(expansion_ratio * out_channels)
    pre_norm: str = "auto"            # auto -> layernorm when attention is on, else none
    expand_norm: str = "auto"         # auto -> batchnorm when attention is off, else none
    expand_act: str = "auto"          # auto -> gelu when attention is on, else silu
    conv_norm: str = "batchnorm"
    conv_act: str = "silu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.stride == 2 and not self.enable_conv:
            raise ValueError("stride 2 requires the depth-wise conv: no other downsampling path exists")
        if self.stride == 2 and self.enable_attn and not self.attn_first:
            raise ValueError(
                "attn_first=False with stride 2 is ill-posed: the attention matrix comes from the "
                "full-resolution input but would be applied to the downsampled features"
            )
        if self.mid_channels is None:
            mid = self.expansion_ratio * self.out_channels
            if abs(mid - round(mid)) > 1e-6 or round(mid) < 1:
                raise ValueError(
                    f"expansion_ratio * out_channels must be a positive integer, "
                    f"got {self.expansion_ratio} * {self.out_channels} = {mid}"
                )
        mid = self.mid
        if self.expand_groups < 1 or self.in_channels % self.expand_groups or mid % self.expand_groups:
            raise ValueError(
                f"expand_groups={self.expand_groups} must divide in_channels={self.in_channels} and mid={mid}"
            )
        h = self.num_heads
        if self.in_channels % h or mid % h:
            raise ValueError(f"heads={h} must divide in_channels={self.in_channels} and mid={mid}")
        if self.pre_norm not in _NORMS or self.expand_norm not in _NORMS[:3]:
            raise ValueError("bad norm binding")
        if self.expand_act not in _ACTS or self.conv_act not in _ACTS[1:] or self.conv_norm not in ("none", "batchnorm"):
            raise ValueError("bad norm/activation binding")

    @property
    def mid(self) -> int:
        if self.mid_channels is not None:
            return self.mid_channels
        return round(self.expansion_ratio * self.out_channels)

    @property
    def num_heads(self) -> int:
        return self.heads if self.heads is not None else default_heads(self.in_channels, self.mid)

    @property
    def orders_equivalent(self) -> bool:
        """Pre- and post-expansion multiplication agree iff groups == heads."""
        return self.expand_groups == self.num_heads

    # resolved norm/activation slots
    @property
    def pre_norm_kind(self) -> str:
        if self.pre_norm != "auto":
            return self.pre_norm
        return "layernorm" if self.enable_attn else "none"

    @property
    def expand_norm_kind(self) -> str:
        if self.expand_norm != "auto":
            return self.expand_norm
        return "none" if self.enable_attn else "batchnorm"

    @property
    def expand_act_kind(self) -> str:
        if self.expand_act != "auto":
            return self.expand_act
        return "gelu" if self.enable_attn else "silu"

    def conv_specs(self) -> dict[str, ConvSpec]:
        cin, cout, mid = self.in_channels, self.out_channels, self.mid
        specs = {
            "expand": ConvSpec(cin, mid, kernel=1, groups=self.expand_groups),
            "shrink": ConvSpec(mid, cout, kernel=1),
        }
        if self.enable_attn:
            specs["q"] = ConvSpec(cin, cin, kernel=1)
            specs["k"] = ConvSpec(cin, cin, kernel=1)
        if self.enable_conv:
            specs["dw"] = ConvSpec(
                mid, mid, kernel=self.kernel, stride=self.stride, padding=(self.kernel - 1) // 2, groups=mid
            )
        return specs

    def norm_slots(self) -> dict[str, tuple[str, int]]:
        """name -> (kind, width) for every materialized normalization."""
        slots = {}
        if self.pre_norm_kind != "none":
            slots["norm_pre"] = (self.pre_norm_kind, self.in_channels)
        if self.expand_norm_kind != "none":
            slots["norm_e"] = (self.expand_norm_kind, self.mid)
        if self.enable_conv and self.conv_norm != "none":
            slots["norm_dw"] = (self.conv_norm, self.mid)
        return slots


def irmb_init_params(cfg: IRMBConfig, rng: Rng, prefix: str = "", precision: str = "f32") -> dict[str, np.ndarray]:
    dt = dtype_of(precision)
    params: dict[str, np.ndarray] = {}

    def put(name, arr):
        params[prefix + name] = np.ascontiguousarray(np.asarray(arr).astype(dt, copy=False))

    for name, spec in cfg.conv_specs().items():
        fan_in = (spec.in_channels // spec.groups) * spec.kernel ** 2
        put(f"{name}.w", rng.normal(prefix + f"{name}.w", spec.weight_shape(), std=fan_in ** -0.5, precision=precision))
        put(f"{name}.b", np.zeros(spec.out_channels))
    for slot, (kind, width) in cfg.norm_slots().items():
        put(f"{slot}.g", np.ones(width))
        put(f"{slot}.b", np.zeros(width))
        if kind == "batchnorm":
            put(f"{slot}.mean", np.zeros(width))
            put(f"{slot}.var", np.ones(width))
    return params


def _norm(x, kind, params, key):
    if kind == "none":
        return x
    g, b = params[key + ".g"], params[key + ".b"]
    if kind == "layernorm":
        return T.layernorm_channels(x, g, b)
    return T.batchnorm_inference(x, g, b, params[key + ".mean"], params[key + ".var"])


def ew_mhsa(x, cfg: IRMBConfig, params, prefix: str = ""):
    """Expanded-window attention stage: unexpanded Q/K, expanded values.

    Returns the expanded features (cfg.mid channels) at the input resolution.
    With `attn_pre_expand` the per-head attention matrices multiply the raw
    head slices of x and the expansion MLP runs afterwards; otherwise the
    expansion runs first and attention mixes its output.
    """
    if not cfg.enable_attn:
        raise ValueError("ew_mhsa called on a config with enable_attn=False")
    n = T.val(x).shape[0]
    specs = cfg.conv_specs()
    heads = cfg.num_heads
    q = T.conv2d(x, params[prefix + "q.w"], specs["q"], params[prefix + "q.b"])
    k = T.conv2d(x, params[prefix + "k.w"], specs["k"], params[prefix + "k.b"])
    qt, layout = window_partition(q, cfg.window)
    kt, _ = window_partition(k, cfg.window)
    attn = attention_weights(qt, kt, heads, key_padding_bias(layout, n, T.val(x).dtype))
    if cfg.attn_pre_expand:
        xt, _ = window_partition(x, cfg.window)
        mixed = window_merge(mix_values(attn, xt, heads), layout, n)
        return T.conv2d(mixed, params[prefix + "expand.w"], specs["expand"], params[prefix + "expand.b"])
    v = T.conv2d(x, params[prefix + "expand.w"], specs["expand"], params[prefix + "expand.b"])
    vt, _ = window_partition(v, cfg.window)
    return window_merge(mix_values(attn, vt, heads), layout, n)


def _attention_mix_mid(u, v, cfg: IRMBConfig, params, prefix):
    """Attention from unexpanded u applied to already-expanded features v."""
    n = T.val(u).shape[0]
    specs = cfg.conv_specs()
    q = T.conv2d(u, params[prefix + "q.w"], specs["q"], params[prefix + "q.b"])
    k = T.conv2d(u, params[prefix + "k.w"], specs["k"], params[prefix + "k.b"])
    qt, layout = window_partition(q, cfg.window)
    kt, _ = window_partition(k, cfg.window)
    attn = attention_weights(qt, kt, cfg.num_heads, key_padding_bias(layout, n, T.val(u).dtype))
    vt, _ = window_partition(v, cfg.window)
    return window_merge(mix_values(attn, vt, cfg.num_heads), layout, n)


def irmb_forward(x, cfg: IRMBConfig, params, prefix: str = ""):
    """One block: attention/expansion stage, depth-wise conv stage, shrink, residual."""
    xv = T.val(x)
    if xv.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {xv.shape[1]} channels, config expects {cfg.in_channels}")
    specs = cfg.conv_specs()
    keep_residual = cfg.stride == 1 and cfg.in_channels == cfg.out_channels

    u = _norm(x, cfg.pre_norm_kind, params, prefix + "norm_pre")

    if cfg.enable_attn and cfg.attn_first:
        v = ew_mhsa(u, cfg, params, prefix)
    else:
        v = T.conv2d(u, params[prefix + "expand.w"], specs["expand"], params[prefix + "expand.b"])
        v = _norm(v, cfg.expand_norm_kind, params, prefix + "norm_e")
    v = T.activate(v, cfg.expand_act_kind)

    if cfg.enable_conv:
        t = T.conv2d(v, params[prefix + "dw.w"], specs["dw"], params[prefix + "dw.b"])
        t = _norm(t, cfg.conv_norm, params, prefix + "norm_dw")
        t = T.activate(t, cfg.conv_act)
        v = T.add(v, t) if cfg.stride == 1 else t

    if cfg.enable_attn and not cfg.attn_first:
        v = _attention_mix_mid(u, v, cfg, params, prefix)

    y = T.conv2d(v, params[prefix + "shrink.w"], specs["shrink"], params[prefix + "shrink.b"])
    return T.add(x, y) if keep_residual else y


# ---------------------------------------------------------------------------
# order-exchange equivalence


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs_diff: float
    holds: bool
    tolerance: float
    groups: int
    heads: int


def random_block_params(cfg: IRMBConfig, seed: int, precision: str = "f64",
                        prefix: str = "") -> dict[str, np.ndarray]:
    """Generic random weights for every leaf (biases and norms included)."""
    rng = Rng(seed)
    params = irmb_init_params(cfg, rng, prefix, precision)
    out = {}
    for name, arr in params.items():
        if name.endswith(".var"):
            out[name] = (0.5 + rng.uniform(name, arr.shape, 0.0, 1.0, precision)).astype(arr.dtype)
        else:
            out[name] = rng.normal(name, arr.shape, std=0.5, precision=precision)
    return out


def equivalence_check(cfg: IRMBConfig, seed: int, hw: tuple[int, int] | None = None,
                      precision: str = "f64") -> EquivalenceReport:
    """Run the attention stage in both multiplication orders on random data.

    With expand_groups == heads the two orders must agree to rounding; with
    differing groups they generically do not.
    """
    if not cfg.enable_attn:
        raise ValueError("equivalence_check needs an attention-enabled config")
    h, w = hw if hw is not None else (2 * cfg.window, 2 * cfg.window)
    params = random_block_params(cfg, seed, precision)
    x = Rng(seed ^ 0x5EED).normal("equiv.input", (1, cfg.in_channels, h, w), std=1.0, precision=precision)
    pre = ew_mhsa(x, replace(cfg, attn_pre_expand=True), params)
    post = ew_mhsa(x, replace(cfg, attn_pre_expand=False), params)
    diff = float(np.max(np.abs(pre - post)))
    tol = 1e-10 if precision == "f64" else 1e-5
    return EquivalenceReport(diff, diff < tol, tol, cfg.expand_groups, cfg.num_heads)
