import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from lanecast.autodiff import LayerParams, OptimizerState, Tensor, backward, sgd_step, softmax_cross_entropy
from lanecast.autodiff.layers import temporal_layer
from lanecast.dataset import ManeuverClass
from lanecast.errors import ConfigurationError, DimensionError
from lanecast.models import (
    ModelConfig,
    StBlockParams,
    _residual_unit,
    batch_logits,
    build_model,
    disjoint_forward,
    disjoint_logits,
    fuse_softmax,
    load_model,
    predict,
    predict_proba,
    residual_branch,
    residual_unit_forward,
    save_model,
    st_block_forward,
    st_forward,
    st_logits,
    temporal_conv_inject,
)

TINY_ST = dict(kind="st-multiplier", input_size=32, stem_width=4, stage_widths=(4, 8), stage_blocks=(1, 1), temporal_after=(1, 2))


def make_block(seed, cin, cout, stride, batchnorm=True, dtype=np.float64):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(batchnorm=batchnorm)
    return StBlockParams(
        _residual_unit(cin, cout, stride, rng, cfg, dtype), _residual_unit(cin, cout, stride, rng, cfg, dtype)
    )


# ---------------------------------------------------------------- fusion & predict


def test_mean_fusion_example():
    fused = fuse_softmax(np.array([0.2, 0.5, 0.3]), np.array([0.4, 0.1, 0.5]))
    np.testing.assert_allclose(fused, [0.3, 0.3, 0.4])
    assert predict(fused) is ManeuverClass.RLC


@pytest.mark.parametrize(
    "probs, expected",
    [([0.3, 0.3, 0.4], ManeuverClass.RLC), ([0.4, 0.4, 0.2], ManeuverClass.NLC), ([1 / 3] * 3, ManeuverClass.NLC)],
)
def test_predict_examples(probs, expected):
    assert predict(np.array(probs)) is expected


def test_predict_batch():
    np.testing.assert_array_equal(predict(np.array([[0.1, 0.45, 0.45], [0.2, 0.2, 0.6]])), [1, 2])


def test_fusion_idempotent_with_identical_streams():
    # L = 2 gives a 4-channel motion stream; zero its fourth input channel and
    # copy every spatial weight so both streams compute the same function.
    cfg = ModelConfig(kind="disjoint", input_size=48, flow_pairs=2, conv_widths=(4, 6, 8, 8, 8), fc_widths=(16, 8))
    model = build_model(cfg, seed=3)
    for name, layer in model.layers.items():
        if not name.startswith("spatial."):
            continue
        twin = model.layers[name.replace("spatial.", "motion.")]
        w = layer.weight.data
        if name == "spatial.conv1":
            twin.weight.data = np.concatenate([w, np.zeros_like(w[:, :1])], axis=1)
        else:
            twin.weight.data = w.copy()
        if layer.bias is not None:
            twin.bias.data = layer.bias.data.copy()
    app = np.random.default_rng(0).standard_normal((2, 3, 48, 48))
    flow = np.concatenate([app, np.zeros((2, 1, 48, 48))], axis=1)
    ls, lm = disjoint_logits(model, app, flow)
    np.testing.assert_allclose(ls.data, lm.data, atol=1e-5)
    fused = disjoint_forward(model, app, flow)
    e = np.exp(ls.data - ls.data.max(axis=1, keepdims=True))
    np.testing.assert_allclose(fused, e / e.sum(axis=1, keepdims=True), atol=1e-6)


def test_disjoint_batch_shape_and_normalization():
    model = build_model(ModelConfig.preset("disjoint"), seed=0)
    rng = np.random.default_rng(1)
    probs = disjoint_forward(model, rng.standard_normal((4, 3, 112, 112)), rng.standard_normal((4, 20, 112, 112)))
    assert probs.shape == (4, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_disjoint_stream_structure():
    model = build_model(ModelConfig.preset("disjoint"), seed=0)
    for stream, cin in (("spatial", 3), ("motion", 20)):
        convs = [k for k in model.layers if k.startswith(f"{stream}.conv")]
        fcs = [k for k in model.layers if k.startswith(f"{stream}.fc")]
        assert len(convs) == 5 and len(fcs) == 3
        assert model.layers[f"{stream}.conv1"].weight.shape[1] == cin
        assert model.layers[f"{stream}.fc3"].out_features == 3


def test_disjoint_shape_mismatch():
    model = build_model(ModelConfig.preset("disjoint"), seed=0)
    with pytest.raises(DimensionError):
        disjoint_forward(model, np.zeros((2, 3, 112, 112)), np.zeros((2, 18, 112, 112)))
    with pytest.raises(DimensionError):
        disjoint_forward(model, np.zeros((2, 3, 96, 96)), np.zeros((2, 20, 96, 96)))


# ---------------------------------------------------------------- gated block


@pytest.mark.parametrize("cin, cout, stride", [(4, 4, 1), (3, 5, 2)])
def test_gate_of_ones_is_plain_residual(cin, cout, stride):
    block = make_block(0, cin, cout, stride)
    x_a = np.random.default_rng(1).standard_normal((2, cin, 8, 8))
    a_next, _ = st_block_forward(block, Tensor(x_a), Tensor(np.ones_like(x_a)))
    ref = residual_unit_forward(block.appearance, Tensor(x_a))
    np.testing.assert_allclose(a_next.data, ref.data, atol=1e-12)


def test_gate_of_zeros_annihilates_branch_input():
    block = make_block(2, 4, 4, 1, batchnorm=False)
    x_a = Tensor(np.random.default_rng(3).standard_normal((2, 4, 6, 6)))
    x_m = Tensor(-np.abs(np.random.default_rng(4).standard_normal((2, 4, 6, 6))))
    a_next, _ = st_block_forward(block, x_a, x_m)
    expected = np.maximum(x_a.data, 0) + residual_branch(block.appearance, Tensor(np.zeros((2, 4, 6, 6)))).data
    np.testing.assert_allclose(a_next.data, expected, atol=1e-12)


def test_motion_output_is_ungated():
    block = make_block(5, 4, 4, 1)
    rng = np.random.default_rng(6)
    x_m = Tensor(rng.standard_normal((2, 4, 6, 6)))
    _, m1 = st_block_forward(block, Tensor(rng.standard_normal((2, 4, 6, 6))), x_m)
    _, m2 = st_block_forward(block, Tensor(rng.standard_normal((2, 4, 6, 6))), x_m)
    np.testing.assert_array_equal(m1.data, m2.data)


def test_gated_block_shape_mismatch():
    block = make_block(0, 4, 4, 1)
    with pytest.raises(DimensionError):
        st_block_forward(block, Tensor(np.zeros((1, 4, 6, 6))), Tensor(np.zeros((1, 4, 5, 6))))


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    cin=st.integers(1, 5),
    cout=st.integers(1, 5),
    stride=st.sampled_from([1, 2]),
    size=st.integers(4, 9),
    batchnorm=st.booleans(),
)
def test_saturated_gate_reduction_property(seed, cin, cout, stride, size, batchnorm):
    block = make_block(seed, cin, cout, stride, batchnorm)
    x_a = np.random.default_rng(seed + 1).standard_normal((2, cin, size, size))
    a_next, _ = st_block_forward(block, Tensor(x_a), Tensor(np.ones_like(x_a)))
    np.testing.assert_allclose(a_next.data, residual_unit_forward(block.appearance, Tensor(x_a)).data, atol=1e-6)


@pytest.mark.parametrize("training", [False, True])
def test_gated_block_gradcheck(training):
    block = make_block(7, 3, 4, 2)
    rng = np.random.default_rng(8)
    x_a = rng.standard_normal((2, 3, 6, 6))
    x_m = rng.standard_normal((2, 3, 6, 6))
    w_a = block.appearance.conv1.weight.data.copy()
    w_m = block.motion.conv2.weight.data.copy()

    def build(xa, xm, wa, wm):
        block.appearance.conv1.weight = wa
        block.motion.conv2.weight = wm
        a, m = st_block_forward(block, xa, xm, training)
        return a + m

    assert check_gradients(build, [x_a, x_m, w_a, w_m], seed=9) < 1e-4


def test_cross_stream_gradient_nonzero_over_seeds():
    for seed in range(100):
        block = make_block(seed, 3, 3, 1)
        rng = np.random.default_rng(seed + 1000)
        x_a = Tensor(rng.standard_normal((1, 3, 5, 5)))
        x_m = Tensor(rng.standard_normal((1, 3, 5, 5)), requires_grad=True)
        a_next, _ = st_block_forward(block, x_a, x_m)
        backward((a_next * Tensor(rng.standard_normal(a_next.shape))).sum())
        assert np.abs(x_m.grad).max() > 1e-8, seed
        for layer in (block.appearance.conv1, block.appearance.conv2, block.motion.conv1, block.motion.conv2):
            layer.weight.grad = None
        for unit in (block.appearance, block.motion):
            for layer in (unit.bn1, unit.bn2, unit.proj, unit.proj_bn):
                if layer is not None:
                    for p in layer.parameters():
                        p.grad = None


# ---------------------------------------------------------------- temporal convolution


def identity_temporal(channels, kernel=3):
    w = np.zeros((channels, channels, kernel))
    w[:, :, kernel // 2] = np.eye(channels)
    return LayerParams("conv1d-temporal", Tensor(w), None)


def test_temporal_identity_kernel_exact():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 4, 4))
    out = temporal_conv_inject(Tensor(x), identity_temporal(3))
    np.testing.assert_array_equal(out.data, x)


def test_temporal_box_kernel_on_constant_signal():
    w = np.zeros((2, 2, 3))
    w[0, 0] = w[1, 1] = 1 / 3
    x = np.broadcast_to(np.random.default_rng(1).standard_normal((1, 2, 1, 3, 3)), (1, 2, 6, 3, 3)).copy()
    out = temporal_conv_inject(Tensor(x), LayerParams("conv1d-temporal", Tensor(w), None)).data
    np.testing.assert_allclose(out[:, :, 1:-1], x[:, :, 1:-1], atol=1e-12)
    # zero same-padding drops one of the three taps at each end
    np.testing.assert_allclose(out[:, :, [0, -1]], x[:, :, [0, -1]] * 2 / 3, atol=1e-12)


def test_temporal_too_short_without_padding():
    layer = LayerParams("conv1d-temporal", Tensor(np.ones((2, 2, 3))), None, {"padding": 0})
    with pytest.raises(DimensionError):
        temporal_conv_inject(Tensor(np.zeros((1, 2, 2, 3, 3))), layer)


def test_temporal_inject_gradcheck():
    rng = np.random.default_rng(2)
    layer = temporal_layer(3, rng, dtype=np.float64)
    x = rng.standard_normal((2, 3, 4, 3, 3))

    def build(xt, wt):
        layer.weight = wt
        return temporal_conv_inject(xt, layer)

    assert check_gradients(build, [x, layer.weight.data.copy()]) < 1e-4


def test_temporal_rejects_other_layers():
    model = build_model(ModelConfig.preset("disjoint"), seed=0)
    with pytest.raises(ConfigurationError):
        temporal_conv_inject(Tensor(np.zeros((1, 3, 3, 2, 2))), model.layers["spatial.fc1"])


# ---------------------------------------------------------------- st model


def test_st_forward_default_shape():
    model = build_model(ModelConfig.preset("st-multiplier"), seed=0)
    rng = np.random.default_rng(0)
    probs = st_forward(model, rng.standard_normal((2, 5, 3, 112, 112)), rng.standard_normal((2, 10, 2, 112, 112)))
    assert probs.shape == (2, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_st_config_mismatch():
    model = build_model(ModelConfig(**TINY_ST), seed=0)
    with pytest.raises(DimensionError):
        st_forward(model, np.zeros((1, 4, 3, 32, 32)), np.zeros((1, 10, 2, 32, 32)))
    with pytest.raises(DimensionError):
        st_forward(model, np.zeros((1, 5, 3, 32, 32)), np.zeros((1, 8, 2, 32, 32)))


def test_st_zero_flow_is_deterministic_baseline():
    model = build_model(ModelConfig(**TINY_ST), seed=4)
    rng = np.random.default_rng(1)
    app = rng.standard_normal((2, 5, 3, 32, 32))
    zero = np.zeros((2, 10, 2, 32, 32))
    first = st_forward(model, app, zero)
    np.testing.assert_array_equal(first, st_forward(model, app, zero))
    np.testing.assert_array_equal(first, st_forward(build_model(ModelConfig(**TINY_ST), seed=4), app, zero))


def test_st_degenerate_config_is_linear_in_appearance():
    cfg = ModelConfig(**TINY_ST, batchnorm=False, bias=False)
    model = build_model(cfg, seed=5)
    rng = np.random.default_rng(6)
    app = rng.standard_normal((2, 5, 3, 32, 32))
    flow = rng.standard_normal((2, 10, 2, 32, 32))
    zero = np.zeros_like(flow)
    l1 = st_logits(model, app, zero).data
    np.testing.assert_allclose(st_logits(model, 2 * app, zero).data, 2 * l1, rtol=1e-5, atol=1e-6)
    # with motion present the appearance contribution is still homogeneous of degree one
    base = st_logits(model, np.zeros_like(app), flow).data
    one = st_logits(model, app, flow).data - base
    two = st_logits(model, 2 * app, flow).data - base
    np.testing.assert_allclose(two, 2 * one, rtol=1e-5, atol=1e-6)


def test_st_flow_grouping_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(kind="st-multiplier", flow_pairs=10, appearance_frames=3)


# ---------------------------------------------------------------- config, counts, persistence


def disjoint_count(cin_motion, conv, fc, extent, batchnorm=True):
    total = 0
    for cin in (3, cin_motion):
        widths = (cin,) + conv
        for i, k in enumerate((7, 5, 3, 3, 3)):
            total += widths[i] * widths[i + 1] * k * k + (2 * widths[i + 1] if batchnorm else widths[i + 1])
        dims = (conv[-1] * extent * extent,) + fc + (3,)
        total += sum(a * b + b for a, b in zip(dims, dims[1:]))
    return total


def st_count(motion_in, stem, stages, blocks, temporal_after):
    total = 0
    for cin in (3, motion_in):
        total += cin * stem * 49 + 2 * stem
    cin = stem
    for s, (w, depth) in enumerate(zip(stages, blocks), start=1):
        for b in range(depth):
            unit = cin * w * 9 + w * w * 9 + 4 * w
            if cin != w or (b == 0 and s > 1):
                unit += cin * w + 2 * w
            total += 2 * unit
            cin = w
        if s in temporal_after:
            total += 2 * w * w * 3
    return total + (cin * 3 + 3) + cin * 3


def test_golden_parameter_counts():
    disjoint = build_model(ModelConfig.preset("disjoint"), seed=0).num_parameters()
    st_model = build_model(ModelConfig.preset("st-multiplier"), seed=0).num_parameters()
    assert disjoint == disjoint_count(20, (16, 32, 64, 64, 64), (256, 128), 4) == 820_278
    assert st_model == st_count(4, 16, (16, 32, 64, 128), (2, 2, 2, 2), (2, 4)) == 1_510_195


def test_cnn_m_preset_widths():
    cfg = ModelConfig.preset("disjoint-cnn-m")
    assert cfg.conv_widths == (96, 256, 512, 512, 512) and cfg.fc_widths == (4096, 2048)
    assert disjoint_count(20, cfg.conv_widths, cfg.fc_widths, 4) > 70_000_000


def test_config_json_roundtrip(tmp_path):
    cfg = ModelConfig(**TINY_ST)
    path = tmp_path / "model.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ModelConfig.from_json(path) == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"kind": "disjoint", "depth": 50})
    with pytest.raises(ConfigurationError):
        ModelConfig(kind="resnet")


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(ModelConfig(**TINY_ST), seed=1)
    rng = np.random.default_rng(2)
    app = rng.standard_normal((3, 5, 3, 32, 32)).astype(np.float32)
    flow = rng.standard_normal((3, 20, 32, 32)).astype(np.float32)
    batch_logits(model, app, flow, training=True)  # moves running statistics away from their init
    save_model(tmp_path / "m.lcck", model, {"note": "x"})
    back, meta = load_model(tmp_path / "m.lcck")
    assert meta["note"] == "x"
    np.testing.assert_array_equal(predict_proba(back, app, flow), predict_proba(model, app, flow))
    bn = next(k for k, v in model.layers.items() if v.kind == "batchnorm")
    np.testing.assert_array_equal(back.layers[bn].running_mean, model.layers[bn].running_mean)


@pytest.mark.parametrize("kind", ["disjoint", "st-multiplier"])
def test_overfit_canary(kind):
    if kind == "disjoint":
        cfg = ModelConfig(kind="disjoint", input_size=32)
    else:
        cfg = ModelConfig(**TINY_ST)
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    app = rng.standard_normal((8, 5, 3, 32, 32)).astype(np.float32)
    flow = rng.standard_normal((8, 20, 32, 32)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    opt = OptimizerState.for_params(model.parameters(), 0.01)
    for _ in range(500):
        losses = [softmax_cross_entropy(lg, y)[0] for lg in batch_logits(model, app, flow, training=True)]
        loss = losses[0] if len(losses) == 1 else losses[0] + losses[1]
        if loss.item() < 0.05:
            break
        backward(loss)
        sgd_step(model.parameters(), opt)
    assert loss.item() < 0.05
