import numpy as np
import pytest

from emo import (
    EMOVariantConfig,
    PRESETS,
    Tensor,
    build_emo,
    cost_meter,
    count_costs,
    dumps_params,
    emo_forward,
    load_model,
    preset,
    save_model,
    stage_features,
)

TINY = EMOVariantConfig("tiny", (1, 1, 2, 1), (8, 8, 16, 16), (2.0, 2.0, 2.0, 2.0), num_classes=10)


def test_preset_tables():
    cfg = preset("emo-1m")
    assert cfg.depths == (2, 2, 8, 3)
    assert cfg.dims == (32, 48, 80, 168)
    assert cfg.exp_ratios == (2.0, 2.5, 3.0, 3.5)
    cfg = preset("emo-2m")
    assert cfg.depths == (3, 3, 9, 3)
    assert cfg.dims == (32, 48, 120, 200)
    cfg = preset("emo-5m")
    assert cfg.dims == (48, 72, 160, 288)
    assert cfg.exp_ratios == (2.0, 3.0, 4.0, 4.0)
    assert preset("emo-6m").dims[3] == 320


def test_emo1m_has_15_blocks():
    assert len(build_emo("emo-1m").blocks) == 2 + 2 + 8 + 3 == 15


def test_emo5m_stage4_widths():
    stage4 = [b for _, s, b in preset("emo-5m").block_configs() if s == 4]
    assert all(b.out_channels == 288 for b in stage4)
    assert all(b.mid == 1152 for b in stage4)


def test_attention_only_in_stages_3_and_4():
    for name in PRESETS:
        for _, stage, bcfg in preset(name).block_configs():
            assert bcfg.enable_attn == (stage in (3, 4))
            assert bcfg.enable_conv


def test_stage_monotonicity_of_presets():
    for name in PRESETS:
        cfg = preset(name)
        assert list(cfg.dims) == sorted(cfg.dims)
        assert list(cfg.exp_ratios) == sorted(cfg.exp_ratios)


def test_same_seed_builds_bit_identical_containers():
    a = dumps_params(build_emo(TINY, seed=42).params, "f32")
    b = dumps_params(build_emo(TINY, seed=42).params, "f32")
    c = dumps_params(build_emo(TINY, seed=43).params, "f32")
    assert a == b
    assert a != c


def test_zero_input_gives_class_symmetric_logits():
    model = build_emo(TINY, seed=0, precision="f64")
    logits = emo_forward(model, Tensor.zeros((1, 3, 64, 64), precision="f64"))
    assert logits.shape == (1, 10)
    assert np.all(logits == logits[0, 0])


def test_batch_items_are_independent_and_identical_rows_match():
    model = build_emo(TINY, seed=1, precision="f64")
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 64))
    two = np.concatenate([x, x], axis=0)
    y2 = emo_forward(model, two)
    assert np.array_equal(y2[0], y2[1])
    y1 = emo_forward(model, x)
    np.testing.assert_allclose(y1[0], y2[0], atol=1e-6)


def test_resolution_must_be_multiple_of_32():
    model = build_emo(TINY, seed=0)
    with pytest.raises(ValueError, match="multiples of 32"):
        emo_forward(model, np.zeros((1, 3, 60, 60), dtype=np.float32))
    with pytest.raises(ValueError, match="multiples of 32"):
        count_costs(TINY, 50)


def test_forward_trace_matches_static_count_exactly():
    model = build_emo(TINY, seed=0, precision="f32")
    x = np.zeros((1, 3, 96, 96), dtype=np.float32)
    with cost_meter() as meter:
        emo_forward(model, x)
    rep = count_costs(TINY, 96)
    assert meter.macs == rep.contraction_macs
    assert meter.softmax_elems == rep.softmax_elems
    assert meter.bias_adds == rep.bias_adds
    assert meter.norm_elems == rep.norm_elems
    assert meter.act_elems == rep.act_elems
    assert meter.flops == rep.flops


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_forward_trace_matches_static_count_every_preset_at_224(name):
    model = build_emo(name, seed=0, precision="f32")
    with cost_meter() as meter:
        emo_forward(model, np.zeros((1, 3, 224, 224), dtype=np.float32))
    rep = count_costs(preset(name), 224)
    assert meter.macs == rep.contraction_macs
    assert meter.flops == rep.flops


def test_lambda_dim_mismatch_names_the_stage():
    with pytest.raises(ValueError, match="stage 2"):
        EMOVariantConfig("bad", (1, 1, 1, 1), (8, 9, 16, 16), (2.0, 2.5, 2.0, 2.0))


def test_save_load_forward_bit_identical(tmp_path):
    model = build_emo(TINY, seed=5, precision="f32")
    x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 64, 64)), precision="f32")
    y0 = emo_forward(model, x)
    path = tmp_path / "tiny.emow"
    save_model(model, path)
    again = load_model(TINY, path)
    assert again.precision == "f32"
    y1 = emo_forward(again, x)
    assert y0.tobytes() == y1.tobytes()


def test_load_rejects_mismatched_config(tmp_path):
    model = build_emo(TINY, seed=5)
    path = tmp_path / "tiny.emow"
    save_model(model, path)
    other = EMOVariantConfig("other", (1, 1, 1, 1), (8, 8, 16, 16), (2.0, 2.0, 2.0, 2.0))
    with pytest.raises(Exception, match="does not match"):
        load_model(other, path)


def test_stage_features_shapes():
    model = build_emo(TINY, seed=0, precision="f64")
    x = np.random.default_rng(2).normal(size=(1, 3, 64, 64))
    for stage, (c, r) in {1: (8, 16), 2: (8, 8), 3: (16, 4), 4: (16, 2)}.items():
        f = stage_features(model, x, stage)
        assert f.shape == (1, c, r, r)


def test_weights_are_read_only():
    model = build_emo(TINY, seed=0)
    with pytest.raises(ValueError):
        model.params["head.b"][0] = 1.0


def test_forward_is_bit_deterministic():
    model = build_emo(TINY, seed=3, precision="f32")
    x = np.random.default_rng(4).normal(size=(1, 3, 64, 64)).astype(np.float32)
    assert emo_forward(model, x).tobytes() == emo_forward(model, x).tobytes()


def test_concurrent_forwards_share_the_model_safely():
    from concurrent.futures import ThreadPoolExecutor

    model = build_emo(TINY, seed=6, precision="f64")
    inputs = [np.random.default_rng(s).normal(size=(1, 3, 64, 64)) for s in range(6)]
    serial = [emo_forward(model, x) for x in inputs]
    with ThreadPoolExecutor(max_workers=4) as pool:
        parallel = list(pool.map(lambda x: emo_forward(model, x), inputs))
    for a, b in zip(serial, parallel):
        assert a.tobytes() == b.tobytes()
