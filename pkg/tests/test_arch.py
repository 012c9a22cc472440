import numpy as np
import pytest

from smallobj.arch import (STRIDES, ModelConfig, RawPrediction, WeightsError, backbone_forward,
                           count_params, decode_arrays, decode_predictions, default_anchors,
                           fusion_forward, head_forward, init_head, init_model, iter_arrays,
                           load_params, map_arrays, model_forward, neck_forward, save_params)
from smallobj.tensor import ConvSpec


def conv(cin, cout, k):
    return cout * cin * k * k + cout


def cbam(c):
    h = max(1, c // 16)
    return 2 * c * h + h + c + conv(2, 1, 3)


def dcm(c):
    return 2 * conv(c, c, 1) + 5 * conv(c, c, 3)


def conv_set(cin, c):
    return conv(cin, c, 1) + conv(c, 2 * c, 3) + conv(2 * c, c, 1)


def head(cin, nc):
    h = cin // 2
    return conv(cin, h, 1) + 2 * conv(h, h, 3) + conv(h, 3 * nc, 1) + conv(h, 15, 1)


def expected_params(nc):
    """Closed-form count for width 0.25, blocks (1, 1, 2, 2, 1), fusion width 64."""
    total = conv(3, 8, 3)
    cin = 8
    for c, n in zip((16, 32, 64, 128, 256), (1, 1, 2, 2, 1)):
        total += conv(cin, c, 3) + n * (conv(c, c // 2, 1) + conv(c // 2, c, 3))
        cin = c
    total += dcm(256)
    f = 64
    total += cbam(16) + cbam(32) + cbam(64) + (16 + 16 + 32)
    total += conv(16, f, 1) + conv(32, f, 1) + conv(2 * f + 64, f, 3)
    total += conv_set(256, 128) + conv(128, 64, 1) + conv_set(64 + 128, 64) + conv(64, 32, 1)
    total += conv_set(32 + 64 + f, 32)
    total += conv(32, 64, 3) + conv(64, 128, 3) + conv(128, 256, 3) + dcm(64)
    total += head(64, nc) + head(128, nc) + head(256, nc)
    return total


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(input_size=64, num_classes=4)
    return cfg, init_model(cfg, 3)


def image(size, seed=0):
    return np.random.default_rng(seed).random((3, size, size))


def test_config_defaults():
    cfg = ModelConfig()
    assert cfg.input_size == 640 and cfg.width == 0.25
    assert cfg.blocks == (1, 1, 2, 2, 1)
    assert cfg.fusion_channels == 64
    assert cfg.stage_channels == (16, 32, 64, 128, 256)
    assert cfg.grids == (80, 40, 20)
    assert cfg.anchors == default_anchors(640)


@pytest.mark.parametrize("kw", [dict(input_size=100), dict(width=0.0), dict(width=1.5),
                                dict(blocks=(1, 1)), dict(anchors=(((1, -1),) * 3,) * 3),
                                dict(num_classes=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = ModelConfig(input_size=320, num_classes=7)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert ModelConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()


def test_param_count_matches_closed_form():
    for nc in (4, 80):
        cfg = ModelConfig(num_classes=nc)
        assert count_params(init_model(cfg, 0)) == expected_params(nc)
    cfg = ModelConfig(num_classes=4)
    assert count_params(init_model(cfg, 0)) == count_params(init_model(cfg, 9))


def test_backbone_strides_320():
    cfg = ModelConfig(input_size=320, num_classes=2)
    pyr = backbone_forward(image(320), cfg, init_model(cfg, 0))
    assert pyr.r1.shape == (16, 160, 160)
    assert pyr.r2.shape == (32, 80, 80)
    assert pyr.r3.shape == (64, 40, 40)
    assert [pyr.c3.shape[1], pyr.c4.shape[1], pyr.c5.shape[1]] == [40, 20, 10]


def test_backbone_rejects_bad_size(small):
    cfg, params = small
    with pytest.raises(ValueError):
        backbone_forward(image(48), cfg, params)
    with pytest.raises(ValueError):
        ModelConfig(input_size=48)


def test_fusion_shapes_and_width(small):
    cfg, params = small
    fp = params.fusion
    assert fp.mix.in_channels == 2 * cfg.fusion_channels + cfg.stage_channels[2]
    assert fp.mix.kernel == 3
    rng = np.random.default_rng(1)
    r1, r2, r3 = rng.normal(size=(16, 32, 32)), rng.normal(size=(32, 16, 16)), rng.normal(size=(64, 8, 8))
    assert fusion_forward(r1, r2, r3, fp).shape == (64, 8, 8)


def test_fusion_full_resolution_zero_input(small):
    _, params = small
    out = fusion_forward(np.zeros((16, 320, 320)), np.zeros((32, 160, 160)),
                         np.zeros((64, 80, 80)), params.fusion)
    assert out.shape == (64, 80, 80)
    assert not out.any()


def test_fusion_rejects_swapped_inputs(small):
    _, params = small
    r1, r2, r3 = np.ones((16, 32, 32)), np.ones((32, 16, 16)), np.ones((64, 8, 8))
    with pytest.raises(ValueError, match="strides"):
        fusion_forward(r2, r1, r3, params.fusion)


def test_fusion_uses_each_level(small):
    _, params = small
    rng = np.random.default_rng(2)
    r1, r2, r3 = rng.normal(size=(16, 32, 32)), rng.normal(size=(32, 16, 16)), rng.normal(size=(64, 8, 8))
    base = fusion_forward(r1, r2, r3, params.fusion)
    for i in range(3):
        args = [r1, r2, r3]
        args[i] = args[i] * 1.5 + 0.1
        assert not np.allclose(fusion_forward(*args, params.fusion), base)


def test_head_channels_and_independence(rng):
    h = init_head(rng, 32, 4)
    x = rng.normal(32 * 80 * 80).reshape(32, 80, 80)
    raw = head_forward(x, h, 8)
    assert raw.cls.shape == (12, 80, 80) and raw.reg.shape == (15, 80, 80)
    assert raw.stacked().shape == (27, 80, 80)
    w = np.array(h.cls_conv.weights)
    w[0, 0, 1, 1] += 0.5
    h2 = type(h)(h.reduce, ConvSpec(w, h.cls_conv.bias, 1, 1), h.cls_out, h.reg_conv, h.reg_out)
    raw2 = head_forward(x, h2, 8)
    assert np.array_equal(raw2.reg, raw.reg)
    assert not np.array_equal(raw2.cls, raw.cls)


def test_model_forward_grids_320():
    cfg = ModelConfig(input_size=320, num_classes=4)
    raws = model_forward(image(320), cfg, init_model(cfg, 1))
    assert len(raws) == 3
    assert [r.grid for r in raws] == [(40, 40), (20, 20), (10, 10)]
    assert [r.stride for r in raws] == list(STRIDES)
    assert all(r.cls.shape[0] == 12 and r.reg.shape[0] == 15 for r in raws)


def test_forward_deterministic(small):
    cfg, params = small
    a = model_forward(image(64), cfg, params)
    b = model_forward(image(64), cfg, init_model(cfg, 3))
    for x, y in zip(a, b):
        assert np.array_equal(x.cls, y.cls) and np.array_equal(x.reg, y.reg)
    c = model_forward(image(64), cfg, init_model(cfg, 4))
    assert not np.array_equal(a[0].reg, c[0].reg)


def test_removing_fusion_only_touches_stride8(small):
    cfg, params = small
    cfg2 = ModelConfig(input_size=64, num_classes=4, use_fusion=False)
    p2 = init_model(cfg2, 3)
    assert p2.fusion is None
    assert params.neck.set3[0].in_channels - p2.neck.set3[0].in_channels == cfg.fusion_channels
    a, b = model_forward(image(64), cfg, params), model_forward(image(64), cfg2, p2)
    assert np.array_equal(a[1].reg, b[1].reg) and np.array_equal(a[2].cls, b[2].cls)
    assert not np.array_equal(a[0].reg, b[0].reg)


def test_zero_params_give_zero_maps(small):
    cfg, params = small
    zero = map_arrays(params, np.zeros_like)
    pyr = backbone_forward(image(64), cfg, zero)
    fused = fusion_forward(pyr.r1, pyr.r2, pyr.r3, zero.fusion)
    for f in neck_forward(pyr, fused, zero.neck):
        assert not f.any()
    for r in model_forward(image(64), cfg, zero):
        assert not r.cls.any() and not r.reg.any()


def test_all_outputs_finite(small):
    cfg, params = small
    for r in model_forward(10 * image(64), cfg, params):
        assert np.isfinite(r.cls).all() and np.isfinite(r.reg).all()


def raw_zero(cfg, g, stride):
    return RawPrediction(np.zeros((3 * cfg.num_classes, g, g)), np.zeros((15, g, g)), stride)


def test_decode_center_and_size():
    anchors = (((2.0, 2.0), (4.0, 6.0), (8.0, 8.0)),) * 3
    cfg = ModelConfig(input_size=64, num_classes=2, anchors=anchors)
    raws = [raw_zero(cfg, 64 // s, s) for s in STRIDES]
    dets = decode_predictions(raws, cfg, 0.0)
    first = dets[0]  # scale 8, anchor 0, cell (0, 0)
    assert first.box.center == (4.0, 4.0)
    assert (first.box.width, first.box.height) == (2.0, 2.0)
    assert first.score == 0.25  # sigmoid(0) * sigmoid(0)
    # anchor 1 at cell (3, 5) on the stride-8 grid
    g = 8
    d = dets[g * g + 3 * g + 5]
    assert d.box.center == ((0.5 + 5) * 8, (0.5 + 3) * 8)
    assert (d.box.width, d.box.height) == (4.0, 6.0)


def test_decode_offsets_and_clipping():
    cfg = ModelConfig(input_size=64, num_classes=1)
    raws = [raw_zero(cfg, 64 // s, s) for s in STRIDES]
    reg = raws[2].reg.copy()
    reg[0, 0, 0] = 50.0   # sigmoid -> 1, center x = 32
    reg[2, 0, 0] = 1000.0  # huge width gets clipped to the image
    raws[2] = RawPrediction(raws[2].cls, reg, 32)
    boxes, scores, _ = decode_arrays(raws, cfg, 0.0)
    assert np.isfinite(boxes).all()
    assert boxes.min() >= 0 and boxes.max() <= 64
    k = 8 * 8 * 3 + 4 * 4 * 3  # first stride-32 entry
    assert boxes[k, 0] == 0.0 and boxes[k, 2] == 64.0


def test_decode_drops_low_objectness():
    cfg = ModelConfig(input_size=64, num_classes=3)
    raws = [raw_zero(cfg, 64 // s, s) for s in STRIDES]
    reg = raws[0].reg.copy()
    reg[4::5] = -1e4  # objectness of every anchor on the stride-8 grid
    raws[0] = RawPrediction(raws[0].cls, reg, 8)
    dets = decode_predictions(raws, cfg, 0.001)
    assert len(dets) == 3 * (4 * 4 + 2 * 2)
    assert all(d.box.width > 0 for d in dets)


def test_decode_picks_best_class():
    cfg = ModelConfig(input_size=64, num_classes=3)
    raws = [raw_zero(cfg, 64 // s, s) for s in STRIDES]
    cls = raws[0].cls.copy()
    cls[2, 1, 1] = 4.0  # anchor 0, class 2
    raws[0] = RawPrediction(cls, raws[0].reg, 8)
    _, scores, classes = decode_arrays(raws, cfg, 0.0)
    i = 1 * 8 + 1
    assert classes[i] == 2
    assert scores[i] == pytest.approx(0.5 / (1 + np.exp(-4.0)), rel=1e-15)


def test_weights_round_trip(tmp_path, small):
    cfg, params = small
    path = tmp_path / "w.bin"
    save_params(path, params, cfg)
    n = count_params(params)
    assert path.stat().st_size == 48 + 4 * n
    loaded = load_params(path, cfg)
    for a, b in zip(iter_arrays(params), iter_arrays(loaded)):
        assert np.array_equal(a, b)
    x = image(64)
    for r1, r2 in zip(model_forward(x, cfg, params), model_forward(x, cfg, loaded)):
        assert np.array_equal(r1.reg, r2.reg)


def test_weights_header_checks(tmp_path, small):
    cfg, params = small
    path = tmp_path / "w.bin"
    save_params(path, params, cfg)
    with pytest.raises(WeightsError, match="different model config"):
        load_params(path, ModelConfig(input_size=64, num_classes=5))
    blob = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(blob[:-4])
    with pytest.raises(WeightsError, match="payload"):
        load_params(tmp_path / "t.bin", cfg)
    (tmp_path / "m.bin").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(WeightsError, match="not a weights file"):
        load_params(tmp_path / "m.bin", cfg)
