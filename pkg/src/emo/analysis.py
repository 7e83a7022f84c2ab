"""Cost accounting, closed-form oracles, influence masks, path lengths,
diagonal similarity, and gradient checking.

The static counter (`count_costs`) walks configurations and enumerates the
same work the kernels meter at run time, so a forward trace under
`ops.cost_meter()` reproduces the static numbers exactly: MACs count the
contractions of conv/matmul calls, softmax is itemized per attention-matrix
element (3 flops each), and bias adds / normalization / activation elements
are reported separately so any FLOP convention can be reconstructed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import binary_dilation

from . import autograd as ag
from .attention import WindowLayout
from .irmb import IRMBConfig, irmb_forward, random_block_params
from .mmb import MMBConfig, mmb_forward, mmb_init_params
from .model import EMOModel, EMOVariantConfig, build_emo, emo_forward
from .ops import ConvSpec
from .tensor import Rng

CATEGORIES = ("stem", "mlp", "attention", "dwconv", "norm", "head")


# ---------------------------------------------------------------------------
# cost report


@dataclass
class CostLine:
    name: str
    category: str
    params: int = 0
    macs: int = 0
    softmax_elems: int = 0
    bias_adds: int = 0
    norm_elems: int = 0
    act_elems: int = 0
    other_adds: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + 3 * self.softmax_elems

    @property
    def macs_total(self) -> float:
        return self.flops / 2


@dataclass
class CostReport:
    target: str
    resolution: int
    lines: list[CostLine] = field(default_factory=list)

    def _sum(self, attr, pred=lambda ln: True):
        return sum(getattr(ln, attr) for ln in self.lines if pred(ln))

    @property
    def params(self) -> int:
        return self._sum("params")

    @property
    def macs(self) -> float:
        return self.flops / 2

    @property
    def contraction_macs(self) -> int:
        return self._sum("macs")

    @property
    def softmax_elems(self) -> int:
        return self._sum("softmax_elems")

    @property
    def flops(self) -> int:
        return 2 * self._sum("macs") + 3 * self._sum("softmax_elems")

    @property
    def bias_adds(self) -> int:
        return self._sum("bias_adds")

    @property
    def norm_elems(self) -> int:
        return self._sum("norm_elems")

    @property
    def act_elems(self) -> int:
        return self._sum("act_elems")

    def by_category(self) -> dict[str, dict[str, float]]:
        out = {}
        for cat in CATEGORIES:
            pred = lambda ln, c=cat: ln.category == c
            flops = 2 * self._sum("macs", pred) + 3 * self._sum("softmax_elems", pred)
            out[cat] = {"params": self._sum("params", pred), "macs": flops / 2, "flops": flops}
        return out

    def fractions(self) -> dict[str, dict[str, float]]:
        cats = self.by_category()
        tp, tm = self.params, self.macs
        return {
            cat: {
                "params": (v["params"] / tp) if tp else 0.0,
                "macs": (v["macs"] / tm) if tm else 0.0,
            }
            for cat, v in cats.items()
        }

    def by_block(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for ln in self.lines:
            block = ln.name.rsplit(".", 1)[0] if "." in ln.name else ln.name
            rec = out.setdefault(block, {"params": 0, "macs": 0.0, "flops": 0})
            rec["params"] += ln.params
            rec["flops"] += ln.flops
            rec["macs"] = rec["flops"] / 2
        return out

    def as_dict(self) -> dict:
        return {
            "target": self.target,
            "resolution": self.resolution,
            "totals": {
                "params": self.params,
                "macs": self.macs,
                "flops": self.flops,
                "bias_adds": self.bias_adds,
                "norm_elems": self.norm_elems,
                "act_elems": self.act_elems,
            },
            "by_category": self.by_category(),
            "fractions": self.fractions(),
            "by_block": self.by_block(),
        }

    def as_text(self) -> str:
        rows = [f"{self.target} @ {self.resolution}"]
        rows.append(f"{'category':<10} {'params':>12} {'MACs':>16} {'FLOPs (2x)':>16} {'%P':>7} {'%M':>7}")
        fr = self.fractions()
        for cat, rec in self.by_category().items():
            if rec["params"] == 0 and rec["flops"] == 0:
                continue
            rows.append(
                f"{cat:<10} {rec['params']:>12,} {rec['macs']:>16,.1f} {rec['flops']:>16,} "
                f"{fr[cat]['params'] * 100:>6.2f}% {fr[cat]['macs'] * 100:>6.2f}%"
            )
        rows.append(f"{'total':<10} {self.params:>12,} {self.macs:>16,.1f} {self.flops:>16,}")
        return "\n".join(rows)


# ---------------------------------------------------------------------------
# static counting


def _attn_matmul_counts(h: int, w: int, window: int, heads: int, c_qk: int, c_v: int):
    layout = WindowLayout(h, w, window)
    nw, l = layout.num_windows, layout.tokens_per_window
    logits = nw * l * l * c_qk
    av = nw * l * l * c_v
    softmax = heads * nw * l * l
    return logits + av, softmax


def _irmb_lines(name: str, cfg: IRMBConfig, h: int, w: int) -> list[CostLine]:
    cin, cout, mid = cfg.in_channels, cfg.out_channels, cfg.mid
    lines: list[CostLine] = []
    specs = cfg.conv_specs()
    if cfg.enable_conv:
        ho, wo = specs["dw"].out_hw(h, w)
    else:
        ho, wo = h, w
    li, lo = h * w, ho * wo

    if cfg.pre_norm_kind != "none":
        lines.append(CostLine(f"{name}.norm_pre", "norm", params=2 * cin, norm_elems=cin * li))
    if cfg.enable_attn:
        for p in ("q", "k"):
            lines.append(CostLine(f"{name}.{p}", "attention", params=(cin + 1) * cin,
                                  macs=cin * cin * li, bias_adds=cin * li))
        c_v = cin if (cfg.attn_first and cfg.attn_pre_expand) else mid
        mm, sm = _attn_matmul_counts(h, w, cfg.window, cfg.num_heads, cin, c_v)
        lines.append(CostLine(f"{name}.attn", "attention", macs=mm, softmax_elems=sm))
    exp = specs["expand"]
    lines.append(CostLine(f"{name}.expand", "mlp", params=exp.param_count(),
                          macs=exp.macs(1, 1) * li, bias_adds=mid * li,
                          act_elems=(mid * li if cfg.expand_act_kind != "none" else 0)))
    if cfg.expand_norm_kind != "none":
        lines.append(CostLine(f"{name}.norm_e", "norm", params=2 * mid, norm_elems=mid * li))
    if cfg.enable_conv:
        dw = specs["dw"]
        lines.append(CostLine(f"{name}.dw", "dwconv", params=dw.param_count(),
                              macs=dw.macs(h, w), bias_adds=mid * lo,
                              act_elems=(mid * lo if cfg.conv_act != "none" else 0),
                              other_adds=(mid * lo if cfg.stride == 1 else 0)))
        if cfg.conv_norm != "none":
            lines.append(CostLine(f"{name}.norm_dw", "norm", params=2 * mid, norm_elems=mid * lo))
    shr = specs["shrink"]
    lines.append(CostLine(f"{name}.shrink", "mlp", params=shr.param_count(),
                          macs=shr.macs(1, 1) * lo, bias_adds=cout * lo,
                          other_adds=(cout * lo if (cfg.stride == 1 and cin == cout) else 0)))
    return lines


def _mmb_lines(name: str, cfg: MMBConfig, h: int, w: int) -> list[CostLine]:
    from .mmb import _conv_specs

    c, mid = cfg.channels, cfg.mid_channels
    li = h * w
    attn_block = cfg.operator == "ewmhsa"
    mlp_cat = "attention" if attn_block else "mlp"
    lines: list[CostLine] = []
    specs = _conv_specs(cfg)
    if cfg.pre_norm != "none":
        lines.append(CostLine(f"{name}.norm_pre", "norm", params=2 * c, norm_elems=c * li))
    exp = specs["expand"]
    lines.append(CostLine(f"{name}.expand", mlp_cat, params=exp.param_count(),
                          macs=exp.macs(1, 1) * li, bias_adds=mid * li,
                          act_elems=(mid * li if cfg.expand_act != "none" else 0)))
    if cfg.expand_norm != "none":
        lines.append(CostLine(f"{name}.norm_e", "norm", params=2 * mid, norm_elems=mid * li))
    if cfg.uses_attention:
        for p in ("q", "k"):
            lines.append(CostLine(f"{name}.{p}", "attention", params=(c + 1) * c,
                                  macs=c * c * li, bias_adds=c * li))
        window = cfg.window if cfg.window is not None else max(h, w)
        mm, sm = _attn_matmul_counts(h, w, window, cfg.heads, c, mid)
        lines.append(CostLine(f"{name}.attn", "attention", macs=mm, softmax_elems=sm))
    if cfg.uses_conv:
        dw = specs["dw"]
        lines.append(CostLine(f"{name}.dw", "dwconv", params=dw.param_count(),
                              macs=dw.macs(h, w), bias_adds=mid * li,
                              act_elems=(mid * li if cfg.operator_act != "none" else 0),
                              other_adds=(mid * li if cfg.operator in ("ewmhsa_dwconv", "dwconv_ewmhsa") else 0)))
        if cfg.operator_norm != "none":
            lines.append(CostLine(f"{name}.norm_op", "norm", params=2 * mid, norm_elems=mid * li))
    shr = specs["shrink"]
    lines.append(CostLine(f"{name}.shrink", mlp_cat, params=shr.param_count(),
                          macs=shr.macs(1, 1) * li, bias_adds=c * li, other_adds=c * li))
    return lines


def count_costs(target, resolution: int = 224) -> CostReport:
    """Exact parameter and work counts for a model, block, or bare conv.

    MACs are counted for one batch item.
    """
    if isinstance(target, EMOModel):
        target = target.cfg
    if isinstance(target, EMOVariantConfig):
        from .model import check_resolution

        check_resolution(target, resolution, resolution)
        rep = CostReport(target.name, resolution)
        stem = target.stem_spec()
        r = resolution // 2
        rep.lines.append(CostLine("stem.conv", "stem", params=stem.param_count(),
                                  macs=stem.macs(resolution, resolution), bias_adds=stem.out_channels * r * r,
                                  act_elems=stem.out_channels * r * r))
        rep.lines.append(CostLine("stem.bn", "norm", params=2 * stem.out_channels,
                                  norm_elems=stem.out_channels * r * r))
        for name, _stage, bcfg in target.block_configs():
            rep.lines.extend(_irmb_lines(name, bcfg, r, r))
            r //= bcfg.stride
        c4 = target.dims[3]
        rep.lines.append(CostLine("head", "head", params=(c4 + 1) * target.num_classes,
                                  macs=c4 * target.num_classes, bias_adds=target.num_classes,
                                  other_adds=c4 * r * r))
        return rep
    if isinstance(target, IRMBConfig):
        rep = CostReport("irmb", resolution)
        rep.lines.extend(_irmb_lines("block", target, resolution, resolution))
        return rep
    if isinstance(target, MMBConfig):
        rep = CostReport(f"mmb[{target.operator}]", resolution)
        rep.lines.extend(_mmb_lines("block", target, resolution, resolution))
        return rep
    if isinstance(target, ConvSpec):
        rep = CostReport("conv", resolution)
        ho, wo = target.out_hw(resolution, resolution)
        rep.lines.append(CostLine("conv", "dwconv" if target.depthwise else "mlp",
                                  params=target.param_count(), macs=target.macs(resolution, resolution),
                                  bias_adds=(target.out_channels * ho * wo if target.bias else 0)))
        return rep
    raise TypeError(f"cannot count costs of {type(target).__name__}")


# ---------------------------------------------------------------------------
# closed-form module costs


def formula_costs(module_kind: str, C: int, W: int, w: int | None = None,
                  k: int | None = None, G: int = 1) -> dict:
    """Literal closed-form #Params / FLOPs / max-path-length of one module.

    FLOPs follow the 2x-MAC convention (plus 3 flops per softmax element);
    `macs` is the same value halved.
    """
    if C < 1 or W < 1 or G < 1:
        raise ValueError("arguments must be positive")
    L = W * W
    if module_kind == "mhsa":
        params = 4 * (C + 1) * C
        flops = 8 * C * C * L + 4 * C * L * L + 3 * L * L
        mpl = "O(1)"
    elif module_kind == "w-mhsa":
        if w is None:
            raise ValueError("w-mhsa needs the window size w")
        l = w * w
        params = 4 * (C + 1) * C
        flops = 8 * C * C * L + 4 * C * L * l + 3 * L * l
        mpl = "O(Inf)"
    elif module_kind == "conv":
        if k is None:
            raise ValueError("conv needs the kernel size k")
        params = (C * k * k // G + 1) * C if (C * k * k) % G == 0 else ((C * k * k) / G + 1) * C
        flops = (2 * C * k * k // G) * L * C if (2 * C * k * k) % G == 0 else (2 * C * k * k / G) * L * C
        mpl = f"O(2W/(k-1))"
    elif module_kind == "dw-conv":
        if k is None:
            raise ValueError("dw-conv needs the kernel size k")
        params = (k * k + 1) * C
        flops = 2 * k * k * L * C
        mpl = "O(2W/(k-1))"
    else:
        raise ValueError(f"unknown module kind {module_kind!r}")
    return {"params": params, "flops": flops, "macs": flops / 2, "mpl": mpl}


# ---------------------------------------------------------------------------
# influence masks and path length


@dataclass(frozen=True)
class InfluenceMask:
    source: tuple[int, int]
    mask: np.ndarray
    blocks_applied: int

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def _window_closure(mask: np.ndarray, window: int) -> np.ndarray:
    h, w = mask.shape
    out = mask.copy()
    for gi in range(math.ceil(h / window)):
        for gj in range(math.ceil(w / window)):
            sl = (slice(gi * window, min((gi + 1) * window, h)),
                  slice(gj * window, min((gj + 1) * window, w)))
            if mask[sl].any():
                out[sl] = True
    return out


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return binary_dilation(mask, structure=structure)


def _influence_step(mask: np.ndarray, cfg: IRMBConfig, backward: bool) -> np.ndarray:
    """One block's spatial reachability (stride 1)."""
    radius = (cfg.kernel - 1) // 2
    steps = []
    if cfg.enable_attn and cfg.attn_first:
        steps.append(("attn", cfg.window))
    if cfg.enable_conv:
        steps.append(("conv", radius))
    if cfg.enable_attn and not cfg.attn_first:
        steps.append(("attn", cfg.window))
    if backward:
        steps = steps[::-1]
    for kind, arg in steps:
        mask = _window_closure(mask, arg) if kind == "attn" else _dilate(mask, arg)
    return mask


def influence_mask(stack, source: tuple[int, int], resolution: int,
                   mode: str = "structural", seed: int = 0) -> InfluenceMask:
    """Which input pixels can affect the output pixel `source` through `stack`.

    `stack` is a sequence of stride-1 IRMBConfigs. Structural mode propagates
    reachability; vjp mode differentiates a randomly-weighted instantiation
    and marks nonzero input gradients. The two must agree.
    """
    stack = list(stack)
    if not stack:
        raise ValueError("stack must contain at least one block")
    for cfg in stack:
        if cfg.stride != 1:
            raise ValueError("influence masks are defined for stride-1 stacks")
        if cfg.in_channels != cfg.out_channels:
            raise ValueError("influence masks need channel-preserving blocks")
    r, c = source
    if not (0 <= r < resolution and 0 <= c < resolution):
        raise ValueError(f"source {source} outside a {resolution}x{resolution} map")

    if mode == "structural":
        mask = np.zeros((resolution, resolution), dtype=bool)
        mask[r, c] = True
        for cfg in reversed(stack):
            mask = _influence_step(mask, cfg, backward=True)
        return InfluenceMask((r, c), mask, len(stack))
    if mode == "vjp":
        x = ag.Var(Rng(seed ^ 0xA11CE).normal("influence.input",
                                              (1, stack[0].in_channels, resolution, resolution),
                                              precision="f64"))
        v = x
        for i, cfg in enumerate(stack):
            params = random_block_params(cfg, seed + i, precision="f64", prefix=f"blk{i}.")
            v = irmb_forward(v, cfg, params, prefix=f"blk{i}.")
        cot = np.zeros(v.value.shape)
        cot[0, :, r, c] = 1.0
        grads = ag.backward(v, cot)
        gx = np.abs(ag.grad_of(grads, x)).sum(axis=(0, 1))
        return InfluenceMask((r, c), gx > 0.0, len(stack))
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class MPLReport:
    kind: str
    resolution: int
    empirical: int | None          # None = unreachable
    closed_form: int | None        # None for the pure-window O(Inf) case
    closed_form_expr: str

    @property
    def reachable(self) -> bool:
        return self.empirical is not None


def max_path_length(cfg: IRMBConfig, resolution: int) -> MPLReport:
    """Blocks needed for corner-to-corner influence, plus the closed form.

    The simulation propagates influence through the actual block structure
    (partitioned windows, conv dilation). The closed forms are order-of-
    growth ceilings; the partitioned-window cascade can exceed its quoted
    ceiling, which the report makes visible rather than hiding.
    """
    W = resolution
    k, w = cfg.kernel, cfg.window
    if cfg.enable_attn and cfg.enable_conv:
        kind = "cascade"
        closed = math.ceil(2 * W / (k - 1 + 2 * w))
        expr = "ceil(2W/(k-1+2w))"
    elif cfg.enable_conv:
        kind = "conv"
        closed = math.ceil(2 * W / (k - 1))
        expr = "ceil(2W/(k-1))"
    elif cfg.enable_attn:
        kind = "attn"
        closed = 1 if w >= W else None
        expr = "O(1) if w >= W else O(Inf)"
    else:
        raise ValueError("block with both switches off never moves information spatially")

    mask = np.zeros((W, W), dtype=bool)
    mask[0, 0] = True
    target = (W - 1, W - 1)
    empirical = None
    for n in range(1, 4 * W + 2):
        new = _influence_step(mask, cfg, backward=False)
        if new[target]:
            empirical = n
            break
        if np.array_equal(new, mask):
            break
        mask = new
    return MPLReport(kind, W, empirical, closed, expr)


# ---------------------------------------------------------------------------
# diagonal similarity


def diag_similarity_of_features(features: np.ndarray) -> np.ndarray:
    """Cosine similarity between the (0,0) diagonal feature and each (i,i)."""
    if features.ndim != 4:
        raise ValueError("expected (N, C, H, W) features")
    f = features[0]
    n = min(f.shape[1], f.shape[2])
    ref = f[:, 0, 0].astype(np.float64)
    nref = np.linalg.norm(ref)
    sims = np.empty(n)
    sims[0] = 1.0  # self-similarity by definition
    for i in range(1, n):
        v = f[:, i, i].astype(np.float64)
        nv = np.linalg.norm(v)
        sims[i] = float(ref @ v / (nref * nv)) if nref > 0 and nv > 0 else 0.0
    return sims


def diag_similarity(model: EMOModel, stage: int, x) -> np.ndarray:
    """Diagonal cosine-similarity profile of one stage's output features."""
    from .model import stage_features

    return diag_similarity_of_features(stage_features(model, x, stage))


def conv_receptive_radius(cfg: EMOVariantConfig, stage: int) -> dict:
    """Conv-path receptive field at a stage output, in input and stage pixels."""
    radius, jump = 0, 1
    radius += (cfg.stem_spec().kernel - 1) // 2 * jump
    jump *= 2
    for _name, s, bcfg in cfg.block_configs():
        if s > stage:
            break
        radius += (bcfg.kernel - 1) // 2 * jump
        jump *= bcfg.stride
    return {
        "radius_input_px": radius,
        "stage_stride": jump,
        # first diagonal distance (in stage pixels) with disjoint receptive fields
        "disjoint_distance": math.floor(2 * radius / jump) + 1,
    }


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    target: str
    max_rel_err: float
    coords_checked: int
    precision: str


def check_primitives(seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every primitive's VJP; name -> max rel err."""
    from . import ops

    rng = Rng(seed)
    results: dict[str, float] = {}

    def fd_check(name, f, vjp_f, inputs, n_coords=60):
        cot = rng.normal(f"prim.{name}.cot", f(*inputs).shape, precision="f64")
        cot = cot / math.sqrt(cot.size)
        analytic = vjp_f(cot, *inputs)
        if not isinstance(analytic, tuple):
            analytic = (analytic,)
        gmax = max(float(np.max(np.abs(a))) for a in analytic if a is not None)
        floor = 1e-4 * max(gmax, 1e-8)
        worst = 0.0
        picker = rng.stream(f"prim.{name}.coords")
        for ai, grad in enumerate(analytic):
            if grad is None:
                continue
            size = inputs[ai].size
            for flat in picker.choice(size, size=min(n_coords, size), replace=False):
                pert = [np.array(v) for v in inputs]
                view = pert[ai].reshape(-1)
                orig = view[flat]
                view[flat] = orig + step
                up = float((f(*pert) * cot).sum())
                view[flat] = orig - step
                down = float((f(*pert) * cot).sum())
                fd = (up - down) / (2 * step)
                an = float(grad.reshape(-1)[flat])
                worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
        results[name] = worst

    # conv2d: plain, grouped, strided+padded, depth-wise
    for tag, spec in (
        ("conv2d", ops.ConvSpec(4, 6, kernel=3, padding=1, bias=True)),
        ("conv2d_grouped", ops.ConvSpec(4, 8, kernel=3, padding=1, groups=2, bias=True)),
        ("conv2d_strided", ops.ConvSpec(3, 5, kernel=3, stride=2, padding=1, bias=False)),
        ("conv2d_depthwise", ops.ConvSpec(6, 6, kernel=5, padding=2, groups=6, bias=True)),
    ):
        x = rng.normal(f"prim.{tag}.x", (2, spec.in_channels, 6, 6), precision="f64")
        w = rng.normal(f"prim.{tag}.w", spec.weight_shape(), std=0.5, precision="f64")
        if spec.bias:
            b = rng.normal(f"prim.{tag}.b", (spec.out_channels,), std=0.5, precision="f64")
            fd_check(tag, lambda x, w, b, s=spec: ops.conv2d(x, w, s, b),
                     lambda g, x, w, b, s=spec: ops.conv2d_vjp(g, x, w, s), (x, w, b))
        else:
            fd_check(tag, lambda x, w, s=spec: ops.conv2d(x, w, s),
                     lambda g, x, w, s=spec: ops.conv2d_vjp(g, x, w, s)[:2], (x, w))

    a = rng.normal("prim.matmul.a", (3, 4), precision="f64")
    b = rng.normal("prim.matmul.b", (4, 2), precision="f64")
    fd_check("matmul", ops.matmul, lambda g, a, b: ops.matmul_vjp(g, a, b), (a, b))
    ab = rng.normal("prim.matmul_b.a", (2, 3, 4, 5), precision="f64")
    bb = rng.normal("prim.matmul_b.b", (2, 3, 5, 4), precision="f64")
    fd_check("matmul_batched", ops.matmul, lambda g, a, b: ops.matmul_vjp(g, a, b), (ab, bb))

    s = rng.normal("prim.softmax.x", (3, 4, 7), precision="f64")
    fd_check("softmax_lastdim", ops.softmax_lastdim,
             lambda g, x: ops.softmax_lastdim_vjp(g, ops.softmax_lastdim(x)), (s,))

    x4 = rng.normal("prim.bn.x", (2, 5, 4, 4), precision="f64")
    gam = rng.normal("prim.bn.g", (5,), std=0.5, precision="f64")
    bet = rng.normal("prim.bn.b", (5,), std=0.5, precision="f64")
    mean = rng.normal("prim.bn.mean", (5,), std=0.3, precision="f64")
    var = 0.5 + rng.uniform("prim.bn.var", (5,), precision="f64")
    fd_check("batchnorm_inference",
             lambda x, g_, b_: ops.batchnorm_inference(x, g_, b_, mean, var),
             lambda g, x, g_, b_: ops.batchnorm_inference_vjp(g, x, g_, b_, mean, var), (x4, gam, bet))
    fd_check("layernorm_channels",
             lambda x, g_, b_: ops.layernorm_channels(x, g_, b_),
             lambda g, x, g_, b_: ops.layernorm_channels_vjp(g, x, g_, b_), (x4, gam, bet))

    xa = rng.normal("prim.act.x", (3, 4, 5, 5), precision="f64")
    fd_check("silu", ops.silu, ops.silu_vjp, (xa,))
    fd_check("gelu", ops.gelu, ops.gelu_vjp, (xa,))
    return results


def _randomized_leaves(params: dict[str, np.ndarray], seed: int, precision: str) -> dict[str, np.ndarray]:
    rng = Rng(seed)
    out = {}
    for name, arr in params.items():
        if name.endswith(".var"):
            out[name] = (0.5 + rng.uniform(name, arr.shape, 0.0, 1.0, precision))
        else:
            out[name] = rng.normal(name, arr.shape, std=0.5, precision=precision)
    return out


def grad_check(target, seed: int = 0, input_hw: tuple[int, int] = (8, 8),
               precision: str = "f64", num_coords: int = 200, step: float = 1e-5) -> GradCheckReport:
    """Analytic VJP vs central finite differences on a random subsample.

    Relative error uses max(|analytic|, |numeric|, 1e-4 * max-gradient) as
    the denominator, which keeps finite-difference roundoff on near-zero
    coordinates from dominating the report.
    """
    h, w = input_hw
    rng = Rng(seed ^ 0xC0FFEE)

    if isinstance(target, IRMBConfig):
        name = "irmb"
        params = random_block_params(target, seed, precision)
        x0 = rng.normal("gradcheck.x", (1, target.in_channels, h, w), precision=precision)
        fwd = lambda x, p: irmb_forward(x, target, p)
    elif isinstance(target, MMBConfig):
        name = f"mmb[{target.operator}]"
        params = _randomized_leaves(mmb_init_params(target, Rng(seed), precision=precision), seed, precision)
        x0 = rng.normal("gradcheck.x", (1, target.channels, h, w), precision=precision)
        fwd = lambda x, p: mmb_forward(x, target, p)
    elif isinstance(target, EMOModel):
        name = target.cfg.name
        params = dict(target.params)
        x0 = rng.normal("gradcheck.x", (1, target.cfg.in_channels, h, w), precision=target.precision)
        fwd = lambda x, p: emo_forward(replace(target, params=p), x)
    elif isinstance(target, ConvSpec):
        name = "conv2d"
        params = {
            "w": rng.normal("gradcheck.w", target.weight_shape(), std=0.5, precision=precision),
        }
        if target.bias:
            params["b"] = rng.normal("gradcheck.b", (target.out_channels,), std=0.5, precision=precision)
        x0 = rng.normal("gradcheck.x", (1, target.in_channels, h, w), precision=precision)
        fwd = lambda x, p: ag.conv2d(x, p["w"], target, p.get("b"))
    else:
        raise TypeError(f"cannot gradient-check {type(target).__name__}")

    def is_buffer(name: str) -> bool:
        return name.endswith(".mean") or name.endswith(".var")

    leaves = {"__input__": x0, **{k: v for k, v in params.items() if not is_buffer(k)}}
    buffers = {k: v for k, v in params.items() if is_buffer(k)}
    out_probe = fwd(x0, params)
    out_shape = ag.val(out_probe).shape
    cot = rng.normal("gradcheck.cot", out_shape, precision=precision)
    cot = cot / math.sqrt(cot.size)

    def loss(leafs: dict[str, np.ndarray]) -> float:
        p = {k: v for k, v in leafs.items() if k != "__input__"}
        p.update(buffers)
        return float((ag.val(fwd(leafs["__input__"], p)) * cot).sum())

    # analytic pass
    vars_ = {k: ag.Var(v) for k, v in leaves.items()}
    traced_params = {k: v for k, v in vars_.items() if k != "__input__"}
    traced_params.update(buffers)
    y = fwd(vars_["__input__"], traced_params)
    grads = ag.backward(y, cot)
    analytic = {k: ag.grad_of(grads, v) for k, v in vars_.items()}

    # coordinate sample
    names = sorted(leaves)
    sizes = np.array([leaves[k].size for k in names])
    total = int(sizes.sum())
    picker = rng.stream("gradcheck.coords")
    take = min(num_coords, total)
    flat_idx = picker.choice(total, size=take, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    gmax = max(float(np.max(np.abs(a))) if a.size else 0.0 for a in analytic.values())
    floor = 1e-4 * max(gmax, 1e-8)
    max_rel = 0.0
    for fi in sorted(flat_idx.tolist()):
        li = int(np.searchsorted(offsets, fi, side="right") - 1)
        name_i, local = names[li], fi - offsets[li]
        base = {k: np.array(v) for k, v in leaves.items()}
        flat = base[name_i].reshape(-1)
        orig = flat[local]
        flat[local] = orig + step
        up = loss(base)
        flat[local] = orig - step
        down = loss(base)
        fd = (up - down) / (2 * step)
        an = float(analytic[name_i].reshape(-1)[local])
        rel = abs(an - fd) / max(abs(an), abs(fd), floor)
        max_rel = max(max_rel, rel)
    return GradCheckReport(name, max_rel, take, precision)
