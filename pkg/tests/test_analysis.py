import math

import numpy as np
import pytest

from emo import (
    EMOVariantConfig,
    IRMBConfig,
    MMBConfig,
    build_emo,
    conv_receptive_radius,
    count_costs,
    diag_similarity,
    diag_similarity_of_features,
    formula_costs,
    grad_check,
    influence_mask,
    max_path_length,
    preset,
)
from emo.ops import ConvSpec


# ---------------------------------------------------------------------------
# closed forms


def test_formula_mhsa_hand_arithmetic():
    f = formula_costs("mhsa", C=8, W=4)
    assert f["params"] == 288
    assert f["flops"] == 8 * 64 * 16 + 4 * 8 * 256 + 3 * 256 == 17152
    assert f["mpl"] == "O(1)"


def test_formula_dwconv_hand_arithmetic():
    f = formula_costs("dw-conv", C=8, k=3, W=4)
    assert f["params"] == 80
    assert f["flops"] == 2 * 9 * 16 * 8 == 2304
    assert f["mpl"] == "O(2W/(k-1))"


def test_formula_wmhsa_with_global_window_equals_mhsa():
    full = formula_costs("mhsa", C=8, W=4)
    windowed = formula_costs("w-mhsa", C=8, W=4, w=4)
    assert windowed["params"] == full["params"]
    assert windowed["flops"] == full["flops"]
    assert windowed["mpl"] == "O(Inf)"


def test_formula_conv_groups():
    f = formula_costs("conv", C=8, W=4, k=3, G=2)
    assert f["params"] == (8 * 9 // 2 + 1) * 8
    assert f["flops"] == (2 * 8 * 9 // 2) * 16 * 8


# ---------------------------------------------------------------------------
# direct counts vs closed forms (the oracle pairing)


@pytest.mark.parametrize("c", [4, 8, 16])
@pytest.mark.parametrize("res", [4, 8])
def test_direct_mhsa_counts_equal_formula(c, res):
    cfg = MMBConfig(c, 1.0, operator="ewmhsa", heads=1)  # window=None -> global
    rep = count_costs(cfg, resolution=res)
    f = formula_costs("mhsa", C=c, W=res)
    assert rep.params == f["params"]
    assert rep.flops == f["flops"]
    assert rep.macs == f["macs"]


@pytest.mark.parametrize("c", [4, 8, 16])
@pytest.mark.parametrize("res", [4, 8])
@pytest.mark.parametrize("w", [2, 4])
def test_direct_windowed_mhsa_counts_equal_formula(c, res, w):
    cfg = MMBConfig(c, 1.0, operator="ewmhsa", heads=1, window=w)
    rep = count_costs(cfg, resolution=res)
    f = formula_costs("w-mhsa", C=c, W=res, w=w)
    assert rep.params == f["params"]
    assert rep.flops == f["flops"]


@pytest.mark.parametrize("c", [4, 8, 16])
@pytest.mark.parametrize("k", [3, 5])
@pytest.mark.parametrize("res", [4, 8])
def test_direct_dwconv_counts_equal_formula(c, k, res):
    spec = ConvSpec(c, c, kernel=k, padding=(k - 1) // 2, groups=c)
    rep = count_costs(spec, resolution=res)
    f = formula_costs("dw-conv", C=c, k=k, W=res)
    assert rep.params == f["params"]
    assert rep.flops == f["flops"]


def test_isolated_dwconv_block_params():
    spec = ConvSpec(8, 8, kernel=3, padding=1, groups=8)
    assert count_costs(spec, 4).params == (9 + 1) * 8 == 80


# ---------------------------------------------------------------------------
# model-level costs


def test_preset_costs_against_published_budgets():
    targets = {
        "emo-1m": (1.3e6, 261e6),
        "emo-2m": (2.3e6, 439e6),
        "emo-5m": (5.1e6, 903e6),
        "emo-6m": (6.1e6, 961e6),
    }
    for name, (p_ref, m_ref) in targets.items():
        rep = count_costs(preset(name), 224)
        assert abs(rep.params / p_ref - 1) < 0.05, (name, rep.params)
        assert abs(rep.macs / m_ref - 1) < 0.10, (name, rep.macs)


def test_category_sums_and_fractions_are_consistent():
    rep = count_costs(preset("emo-5m"), 224)
    cats = rep.by_category()
    assert sum(v["params"] for v in cats.values()) == rep.params
    assert sum(v["flops"] for v in cats.values()) == rep.flops
    fr = rep.fractions()
    assert abs(sum(v["params"] for v in fr.values()) - 1) < 1e-9
    assert abs(sum(v["macs"] for v in fr.values()) - 1) < 1e-9


def test_report_text_and_dict_render():
    rep = count_costs(preset("emo-1m"), 224)
    text = rep.as_text()
    assert "attention" in text and "total" in text
    doc = rep.as_dict()
    assert doc["totals"]["params"] == rep.params


# ---------------------------------------------------------------------------
# influence masks


def conv_only(c=4, k=3):
    return IRMBConfig(c, c, 2.0, kernel=k, enable_attn=False)


def attn_only(c=4, w=2):
    return IRMBConfig(c, c, 2.0, window=w, heads=2, expand_groups=2, enable_conv=False)


def test_two_dwconv_blocks_give_chebyshev_ball():
    m = influence_mask([conv_only()] * 2, (4, 4), 9, mode="structural")
    want = np.zeros((9, 9), dtype=bool)
    want[2:7, 2:7] = True
    assert np.array_equal(m.mask, want)
    assert m.count == 25


def test_single_global_window_block_covers_map():
    cfg = IRMBConfig(4, 4, 2.0, window=8, heads=2, expand_groups=2)
    m = influence_mask([cfg], (0, 0), 8, mode="structural")
    assert m.mask.all()


def test_windowed_attention_never_crosses_windows():
    stack = [attn_only(w=2)] * 5
    m = influence_mask(stack, (0, 0), 8, mode="structural")
    want = np.zeros((8, 8), dtype=bool)
    want[:2, :2] = True
    assert np.array_equal(m.mask, want)
    v = influence_mask(stack, (0, 0), 8, mode="vjp", seed=2)
    assert np.array_equal(v.mask, want)


@pytest.mark.parametrize("kind", ["conv", "attn", "cascade"])
def test_structural_and_vjp_modes_agree(kind):
    if kind == "conv":
        stack = [conv_only()] * 2
    elif kind == "attn":
        stack = [attn_only(w=3)] * 2
    else:
        stack = [IRMBConfig(4, 4, 2.0, kernel=3, window=2, heads=2, expand_groups=2)] * 2
    for src in [(0, 0), (3, 4), (6, 6)]:
        a = influence_mask(stack, src, 7, mode="structural")
        b = influence_mask(stack, src, 7, mode="vjp", seed=1)
        assert np.array_equal(a.mask, b.mask), (kind, src)


def test_influence_grows_monotonically_with_depth():
    prev = None
    for depth in (1, 2, 3, 4):
        m = influence_mask([conv_only()] * depth, (4, 4), 11, mode="structural")
        assert m.mask.any()
        if prev is not None:
            assert np.all(prev | m.mask == m.mask)  # superset
        prev = m.mask


@pytest.mark.parametrize("k", [3, 5])
def test_conv_radius_grows_exactly_per_block(k):
    for depth in (1, 2, 3):
        m = influence_mask([conv_only(k=k)] * depth, (7, 7), 15, mode="structural")
        ii, jj = np.where(m.mask)
        assert max(np.abs(ii - 7).max(), np.abs(jj - 7).max()) == depth * (k - 1) // 2


def test_executed_work_matches_static_count_across_block_matrix():
    import itertools

    from emo import cost_meter, irmb_forward, random_block_params

    checked = 0
    for attn, conv, stride, attn_first, pre_exp, cout, w, res in itertools.product(
        (False, True), (False, True), (1, 2), (True, False), (True, False),
        (8, 12), (2, 3), (6, 7),
    ):
        if stride == 2 and (not conv or (attn and not attn_first)):
            continue
        if not attn and (not attn_first or not pre_exp):
            continue  # flags only matter with attention
        cfg = IRMBConfig(8, cout, 2.0, window=w, heads=2, expand_groups=2,
                         stride=stride, enable_attn=attn, enable_conv=conv,
                         attn_first=attn_first, attn_pre_expand=pre_exp)
        params = random_block_params(cfg, seed=0)
        x = np.random.default_rng(1).normal(size=(1, 8, res, res))
        with cost_meter() as m:
            irmb_forward(x, cfg, params)
        rep = count_costs(cfg, res)
        key = (attn, conv, stride, attn_first, pre_exp, cout, w, res)
        assert m.macs == rep.contraction_macs, key
        assert m.flops == rep.flops, key
        assert m.bias_adds == rep.bias_adds, key
        assert m.norm_elems == rep.norm_elems, key
        assert m.act_elems == rep.act_elems, key
        checked += 1
    assert checked >= 100


# ---------------------------------------------------------------------------
# max path length


def test_conv_only_path_length_matches_chebyshev_count():
    for k, W in [(3, 8), (5, 8), (3, 14), (5, 14)]:
        rep = max_path_length(IRMBConfig(4, 4, 1.0, kernel=k, enable_attn=False), W)
        assert rep.empirical == math.ceil((W - 1) / ((k - 1) // 2))


def test_global_window_cascade_is_one_hop():
    rep = max_path_length(IRMBConfig(4, 4, 1.0, kernel=3, window=8, heads=1), 8)
    assert rep.empirical == 1


def test_pure_windowed_attention_unreachable():
    rep = max_path_length(IRMBConfig(4, 4, 1.0, window=2, heads=1, enable_conv=False), 8)
    assert rep.empirical is None and not rep.reachable
    assert rep.closed_form is None


def test_cascade_small_window_honest_value():
    # frozen from the propagation simulation: windows advance at most to the
    # window edge, so k=3 w=2 W=8 needs 4 blocks (the quoted ceiling says 3)
    rep = max_path_length(IRMBConfig(4, 4, 1.0, kernel=3, window=2, heads=1), 8)
    assert rep.empirical == 4
    assert rep.closed_form == 3


def test_cascade_beats_conv_only_whenever_window_exceeds_one():
    for k in (3, 5):
        for w in (2, 4, 7):
            for W in (8, 14, 28):
                conv = max_path_length(IRMBConfig(4, 4, 1.0, kernel=k, enable_attn=False), W)
                casc = max_path_length(IRMBConfig(4, 4, 1.0, kernel=k, window=w, heads=1), W)
                assert casc.empirical < conv.empirical, (k, w, W)


# ---------------------------------------------------------------------------
# diagonal similarity


TINY = EMOVariantConfig("tiny", (1, 1, 2, 1), (8, 8, 16, 16), (2.0, 2.0, 2.0, 2.0),
                        num_classes=10, attn_stages=frozenset({3, 4}))
TINY_CONV = EMOVariantConfig("tiny-conv", (1, 1, 2, 1), (8, 8, 16, 16), (2.0, 2.0, 2.0, 2.0),
                             num_classes=10, attn_stages=frozenset())


def test_first_similarity_entry_is_exactly_one():
    model = build_emo(TINY, seed=0, precision="f64")
    x = np.random.default_rng(0).normal(size=(1, 3, 224, 224))
    sims = diag_similarity(model, 3, x)
    assert sims[0] == 1.0
    assert sims.shape == (14,)
    assert np.all(np.abs(sims) <= 1 + 1e-12)


def test_constant_input_conv_only_interior_diagonal_is_constant():
    # translation equivariance on constant input: interior features are all
    # equal, so the similarity profile anchored inside the interior is 1.0
    from emo import stage_features

    model = build_emo(TINY_CONV, seed=3, precision="f64")
    x = np.full((1, 3, 224, 224), 0.5)
    feats = stage_features(model, x, 3)
    rf = conv_receptive_radius(TINY_CONV, 3)
    border = math.ceil(rf["radius_input_px"] / rf["stage_stride"])
    interior = feats[:, :, border:14 - border, border:14 - border]
    assert min(interior.shape[2:]) >= 4
    sims = diag_similarity_of_features(interior)
    np.testing.assert_allclose(sims, 1.0, atol=1e-9)


def test_attention_raises_long_distance_similarity():
    rf = conv_receptive_radius(TINY_CONV, 3)
    d0 = rf["disjoint_distance"]
    wins = 0
    for seed in range(6):
        x = np.random.default_rng(seed).normal(size=(1, 3, 224, 224))
        with_attn = diag_similarity(build_emo(TINY, seed=seed, precision="f64"), 3, x)
        conv_only_sims = diag_similarity(build_emo(TINY_CONV, seed=seed, precision="f64"), 3, x)
        if with_attn[d0:].mean() > conv_only_sims[d0:].mean():
            wins += 1
    assert wins >= 5


def test_similarity_rejects_bad_stage():
    model = build_emo(TINY, seed=0)
    with pytest.raises(ValueError, match="stage"):
        diag_similarity(model, 5, np.zeros((1, 3, 64, 64), dtype=np.float32))


def test_diag_similarity_guards_zero_vectors():
    sims = diag_similarity_of_features(np.zeros((1, 4, 3, 3)))
    assert sims[0] == 1.0 and np.all(sims[1:] == 0.0)


# ---------------------------------------------------------------------------
# gradient checks


def test_linear_map_gradcheck_is_essentially_exact():
    # central differences of a linear map are step-independent; a large step
    # leaves only rounding
    rep = grad_check(ConvSpec(4, 6, kernel=1), seed=2, input_hw=(5, 5), step=0.1)
    assert rep.max_rel_err < 1e-9


def test_full_irmb_gradcheck():
    cfg = IRMBConfig(8, 8, 2.0, window=4, heads=2, expand_groups=2)
    rep = grad_check(cfg, seed=0, input_hw=(8, 8))
    assert rep.max_rel_err < 1e-4
    assert rep.coords_checked >= 200


def test_degenerate_mlp_block_gradcheck():
    cfg = IRMBConfig(8, 8, 2.0, enable_attn=False, enable_conv=False)
    rep = grad_check(cfg, seed=1, input_hw=(8, 8))
    assert rep.max_rel_err < 1e-6


def test_mmb_gradcheck():
    cfg = MMBConfig(4, 2.0, operator="ewmhsa_dwconv", window=2, heads=2,
                    pre_norm="layernorm", expand_act="gelu",
                    operator_norm="batchnorm", operator_act="silu")
    rep = grad_check(cfg, seed=3, input_hw=(4, 4))
    assert rep.max_rel_err < 1e-4


def test_whole_model_gradcheck():
    model = build_emo(
        EMOVariantConfig("grads", (1, 1, 1, 1), (4, 4, 8, 8), (2.0, 2.0, 2.0, 2.0),
                         num_classes=5, windows=(2, 2, 2, 2)),
        seed=0, precision="f64",
    )
    rep = grad_check(model, seed=0, input_hw=(32, 32), num_coords=60)
    assert rep.max_rel_err < 1e-4
