"""4-stage EMO assembly: stem, iRMB stages, classifier head.

Resolution plan for a 224 input: stem (3x3, stride 2) -> 112, then the first
block of every stage strides 2, giving 56/28/14/7 at the four stage outputs.
Attention is enabled for every block of the configured stages (3 and 4 by
default), including the strided entry block, where it runs at the input
resolution before the depth-wise downsampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as T
from .irmb import IRMBConfig, default_heads, irmb_forward, irmb_init_params
from .ops import ConvSpec
from .tensor import Rng, as_nchw, dtype_of

STEM_KERNEL = 3
MIN_INPUT_MULTIPLE = 32


@dataclass(frozen=True)
class EMOVariantConfig:
    """Macro configuration: per-stage depths, widths, expansions, attention."""

    name: str
    depths: tuple[int, int, int, int]
    dims: tuple[int, int, int, int]
    exp_ratios: tuple[float, float, float, float]
    attn_stages: frozenset[int] = frozenset({3, 4})
    windows: tuple[int, int, int, int] = (7, 7, 7, 7)
    num_classes: int = 1000
    head_dim: int = 32
    in_channels: int = 3

    def __post_init__(self):
        for seq, what in ((self.depths, "depths"), (self.dims, "dims"),
                          (self.exp_ratios, "exp_ratios"), (self.windows, "windows")):
            if len(seq) != 4:
                raise ValueError(f"{what} must have 4 entries, got {seq}")
        if any(d < 1 for d in self.depths) or any(c < 1 for c in self.dims):
            raise ValueError("depths and dims must be positive")
        if not self.attn_stages <= {1, 2, 3, 4}:
            raise ValueError(f"attn_stages must be within 1..4, got {sorted(self.attn_stages)}")
        for si in range(4):
            mid = self.exp_ratios[si] * self.dims[si]
            if abs(mid - round(mid)) > 1e-6:
                raise ValueError(
                    f"stage {si + 1}: exp_ratio * dim = {self.exp_ratios[si]} * {self.dims[si]} "
                    f"is not an integer (block s{si + 1} rejects this width)"
                )

    def block_configs(self) -> list[tuple[str, int, IRMBConfig]]:
        """(name, stage, config) for every block, in forward order."""
        out = []
        cin = self.dims[0]  # stem output width
        for si in range(4):
            cout = self.dims[si]
            for b in range(self.depths[si]):
                attn = (si + 1) in self.attn_stages
                c_in = cin if b == 0 else cout
                mid = round(self.exp_ratios[si] * cout)
                cfg = IRMBConfig(
                    in_channels=c_in,
                    out_channels=cout,
                    expansion_ratio=self.exp_ratios[si],
                    window=self.windows[si],
                    heads=default_heads(c_in, mid, self.head_dim),
                    stride=2 if b == 0 else 1,
                    enable_attn=attn,
                    enable_conv=True,
                )
                out.append((f"s{si + 1}.b{b}", si + 1, cfg))
            cin = cout
        return out

    def stem_spec(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.dims[0], kernel=STEM_KERNEL, stride=2, padding=1)


PRESETS: dict[str, EMOVariantConfig] = {
    "emo-1m": EMOVariantConfig("emo-1m", (2, 2, 8, 3), (32, 48, 80, 168), (2.0, 2.5, 3.0, 3.5)),
    "emo-2m": EMOVariantConfig("emo-2m", (3, 3, 9, 3), (32, 48, 120, 200), (2.0, 2.5, 3.0, 3.5)),
    "emo-5m": EMOVariantConfig("emo-5m", (3, 3, 9, 3), (48, 72, 160, 288), (2.0, 3.0, 4.0, 4.0)),
    "emo-6m": EMOVariantConfig("emo-6m", (3, 3, 9, 3), (48, 72, 160, 320), (2.0, 3.0, 4.0, 5.0)),
}


def preset(name: str) -> EMOVariantConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class EMOModel:
    cfg: EMOVariantConfig
    precision: str
    seed: int
    params: dict[str, np.ndarray] = field(repr=False)

    @property
    def blocks(self):
        return self.cfg.block_configs()


def build_emo(cfg: EMOVariantConfig | str, seed: int = 0, precision: str = "f32") -> EMOModel:
    """Deterministically initialize a model; same seed -> identical weights."""
    if isinstance(cfg, str):
        cfg = preset(cfg)
    rng = Rng(seed)
    dt = dtype_of(precision)
    params: dict[str, np.ndarray] = {}

    stem = cfg.stem_spec()
    fan_in = stem.in_channels * stem.kernel ** 2
    params["stem.conv.w"] = rng.normal("stem.conv.w", stem.weight_shape(), std=fan_in ** -0.5, precision=precision)
    params["stem.conv.b"] = np.zeros(stem.out_channels, dtype=dt)
    params["stem.bn.g"] = np.ones(stem.out_channels, dtype=dt)
    params["stem.bn.b"] = np.zeros(stem.out_channels, dtype=dt)
    params["stem.bn.mean"] = np.zeros(stem.out_channels, dtype=dt)
    params["stem.bn.var"] = np.ones(stem.out_channels, dtype=dt)

    for name, _stage, bcfg in cfg.block_configs():
        params.update(irmb_init_params(bcfg, rng, prefix=name + ".", precision=precision))

    c4 = cfg.dims[3]
    head = ConvSpec(c4, cfg.num_classes, kernel=1)
    params["head.w"] = rng.normal("head.w", head.weight_shape(), std=c4 ** -0.5, precision=precision)
    params["head.b"] = np.zeros(cfg.num_classes, dtype=dt)

    for arr in params.values():
        arr.setflags(write=False)
    return EMOModel(cfg=cfg, precision=precision, seed=seed, params=params)


def check_resolution(cfg: EMOVariantConfig, h: int, w: int) -> None:
    if h < MIN_INPUT_MULTIPLE or w < MIN_INPUT_MULTIPLE or h % MIN_INPUT_MULTIPLE or w % MIN_INPUT_MULTIPLE:
        raise ValueError(
            f"input spatial dims must be positive multiples of {MIN_INPUT_MULTIPLE} "
            f"(stem + four stage strides), got {h}x{w}"
        )


def emo_forward(model: EMOModel, x, capture_stages: bool = False):
    """Run the network; returns (N, num_classes) logits.

    With capture_stages=True, also returns {stage: feature map} taken at each
    stage output.
    """
    cfg = model.cfg
    if isinstance(x, T.Var):
        xv = x
    else:
        xv = as_nchw(x).astype(dtype_of(model.precision), copy=False)
    n, c, h, w = T.val(xv).shape
    if c != cfg.in_channels:
        raise ValueError(f"input has {c} channels, model expects {cfg.in_channels}")
    check_resolution(cfg, h, w)

    p = model.params
    v = T.conv2d(xv, p["stem.conv.w"], cfg.stem_spec(), p["stem.conv.b"])
    v = T.batchnorm_inference(v, p["stem.bn.g"], p["stem.bn.b"], p["stem.bn.mean"], p["stem.bn.var"])
    v = T.silu(v)

    captured: dict[int, np.ndarray] = {}
    for name, stage, bcfg in cfg.block_configs():
        v = irmb_forward(v, bcfg, p, prefix=name + ".")
        if capture_stages:
            captured[stage] = T.val(v)  # blocks run in order; last one per stage wins

    pooled = T.mean_hw(v)  # (N, C4)
    n_items, c4 = T.val(pooled).shape
    pooled = T.reshape(pooled, (n_items, c4, 1, 1))
    logits = T.conv2d(pooled, p["head.w"], ConvSpec(c4, cfg.num_classes, kernel=1), p["head.b"])
    logits = T.reshape(logits, (n_items, cfg.num_classes))
    if capture_stages:
        return logits, captured
    return logits


def stage_features(model: EMOModel, x, stage: int) -> np.ndarray:
    """Feature map at the output of one stage (1-based)."""
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"stage must be 1..4, got {stage}")
    _, captured = emo_forward(model, x, capture_stages=True)
    return captured[stage]


def save_model(model: EMOModel, path) -> None:
    from .serialize import save_params

    save_params(path, model.params, model.precision)


def load_model(cfg: EMOVariantConfig | str, path) -> EMOModel:
    """Load weights into a model skeleton, validating names and shapes."""
    from .serialize import ContainerError, load_params

    if isinstance(cfg, str):
        cfg = preset(cfg)
    params, precision = load_params(path)
    skeleton = build_emo(cfg, seed=0, precision=precision)
    expected = {k: v.shape for k, v in skeleton.params.items()}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        shapes = sorted(k for k in expected.keys() & got.keys() if expected[k] != got[k])
        raise ContainerError(
            f"container does not match config {cfg.name!r}: "
            f"missing={missing[:4]} extra={extra[:4]} shape-mismatch={shapes[:4]}"
        )
    return EMOModel(cfg=cfg, precision=precision, seed=skeleton.seed, params=params)
