import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from lanecast.autodiff import (
    LayerParams,
    OptimizerState,
    Tensor,
    backward,
    batchnorm_layer,
    batchnorm_stats,
    conv2d_layer,
    forward,
    functional as F,
    linear_layer,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    softmax_cross_entropy,
)
from lanecast.errors import ContractError, DimensionError, LabelError, NumericError


# ---------------------------------------------------------------- forward


def test_conv2d_constant_input():
    layer = LayerParams("conv2d", Tensor(np.ones((1, 1, 2, 2))), None)
    out = forward(layer, Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_relu():
    out = F.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_maxpool_ramp():
    ramp = np.arange(25, dtype=float).reshape(1, 1, 5, 5)
    out = F.max_pool2d(Tensor(ramp), kernel=3, stride=2)
    # brute-force window maxima
    expected = np.array(
        [[ramp[0, 0, r : r + 3, c : c + 3].max() for c in (0, 2)] for r in (0, 2)]
    )
    np.testing.assert_array_equal(expected.ravel(), [12, 14, 22, 24])
    np.testing.assert_array_equal(out.data[0, 0], expected)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(2, 1), padding=(1, 0)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, j : j + 2] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch_names_axis():
    layer = conv2d_layer(3, 4, 3, np.random.default_rng(0))
    with pytest.raises(DimensionError, match="channels axis"):
        forward(layer, Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32)))


def test_non_finite_input_raises():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_intermediate_raises():
    big = Tensor(np.array([1e308]))
    with pytest.raises(NumericError):
        F.mul(big, big)


# ---------------------------------------------------------------- softmax / xent


def test_xent_uniform_logits():
    loss, probs = softmax_cross_entropy(Tensor([[0.0, 0.0, 0.0]]), [1])
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)
    np.testing.assert_allclose(probs, [[1 / 3] * 3], atol=1e-15)


def test_xent_saturated_is_stable():
    loss, probs = softmax_cross_entropy(Tensor([[1000.0, 0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(probs))


def test_xent_matches_direct_recomputation():
    rng = np.random.default_rng(11)
    logits = rng.standard_normal((4, 3)) * 3
    targets = np.array([0, 2, 1, 2])
    loss, probs = softmax_cross_entropy(Tensor(logits), targets)
    direct = -np.mean([logits[i, targets[i]] - math.log(sum(math.exp(v) for v in logits[i])) for i in range(4)])
    assert loss.item() == pytest.approx(direct, rel=1e-12)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_xent_label_out_of_range():
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor([[0.0, 1.0, 2.0]]), [3])


# ---------------------------------------------------------------- backward


def test_backward_linear_function():
    x = np.array([0.5, -2.0, 3.25])
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward((w * Tensor(x)).sum())
    np.testing.assert_array_equal(w.grad, x)


def test_backward_non_scalar_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * 2.0)


def test_backward_twice_without_step_is_error():
    w = Tensor(np.ones(3), requires_grad=True)
    backward((w * 2.0).sum())
    with pytest.raises(ContractError, match="already holds a gradient"):
        backward((w * 3.0).sum())


def test_backward_empty_tape():
    with pytest.raises(ContractError):
        backward(Tensor(1.0, requires_grad=True))


def _rng(seed=0):
    return np.random.default_rng(seed)


def _bn_build(training):
    def build(x, g, b):
        rm = np.zeros(x.shape[1])
        rv = np.ones(x.shape[1])
        return F.batch_norm(x, g, b, rm, rv, training=training)

    return build


GRADIENT_CASES = {
    "conv2d": (
        lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1),
        lambda r: [r.standard_normal((2, 3, 6, 5)), r.standard_normal((4, 3, 3, 3)), r.standard_normal(4)],
    ),
    "conv1d-temporal": (
        lambda x, w, b: F.conv1d_temporal(x, w, b, padding=1),
        lambda r: [r.standard_normal((2, 3, 5, 2, 2)), r.standard_normal((4, 3, 3)), r.standard_normal(4)],
    ),
    "linear": (
        F.linear,
        lambda r: [r.standard_normal((3, 5)), r.standard_normal((4, 5)), r.standard_normal(4)],
    ),
    "batchnorm-train": (
        _bn_build(True),
        lambda r: [r.standard_normal((4, 3, 3, 3)) * 2 + 1, r.standard_normal(3), r.standard_normal(3)],
    ),
    "batchnorm-eval": (
        _bn_build(False),
        lambda r: [r.standard_normal((4, 3, 3, 3)), r.standard_normal(3), r.standard_normal(3)],
    ),
    "maxpool": (
        lambda x: F.max_pool2d(x, 3, 2),
        lambda r: [r.standard_normal((2, 2, 7, 7))],
    ),
    "relu": (
        F.relu,
        lambda r: [r.standard_normal((3, 4)) + np.sign(r.standard_normal((3, 4))) * 0.1],
    ),
    "softmax-xent": (
        lambda z: softmax_cross_entropy(z, [0, 2, 1, 1])[0],
        lambda r: [r.standard_normal((4, 3))],
    ),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_gradients_match_finite_differences(name):
    build, make = GRADIENT_CASES[name]
    assert check_gradients(build, make(_rng(1))) < 1e-4


def test_composite_gradient():
    def build(x, w, fw, fb):
        h = F.conv2d(x, w, None, stride=1, padding=1)
        h = F.max_pool2d(F.relu(h), 3, 2)
        h = F.linear(h.reshape(h.shape[0], -1), fw, fb)
        return softmax_cross_entropy(h, [0, 2])[0]

    r = _rng(5)
    arrays = [r.standard_normal((2, 2, 7, 7)), r.standard_normal((3, 2, 3, 3)), r.standard_normal((3, 27)) * 0.3, r.standard_normal(3)]
    assert check_gradients(build, arrays) < 1e-4


# ---------------------------------------------------------------- optimizer


def _param(value, grad):
    t = Tensor(np.array([value]), requires_grad=True)
    t.grad = np.array([grad])
    return t


def test_sgd_plain_step():
    w = _param(1.0, 0.5)
    sgd_step([w], OptimizerState.for_params([w], learning_rate=0.1, momentum=0.0))
    assert w.data[0] == pytest.approx(0.95)
    assert w.grad is None


def test_sgd_momentum_two_steps():
    w = _param(1.0, 1.0)
    state = OptimizerState.for_params([w], learning_rate=0.1, momentum=0.9)
    sgd_step([w], state)
    w.grad = np.array([1.0])
    sgd_step([w], state)
    assert w.data[0] == pytest.approx(0.71)


def test_sgd_zero_gradient_fixed_point():
    layer = linear_layer(4, 3, _rng())
    before = [p.data.copy() for p in layer.parameters()]
    for p in layer.parameters():
        p.grad = np.zeros_like(p.data)
    sgd_step([layer], OptimizerState.for_params([layer]))
    for b, p in zip(before, layer.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_sgd_missing_gradient():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        sgd_step([w], OptimizerState.for_params([w]))


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_constant_input_training():
    layer = batchnorm_layer(2, dtype=np.float64)
    out = batchnorm_stats(Tensor(np.full((1, 2, 3, 3), 5.0)), layer, training=True)
    np.testing.assert_array_equal(out.data, 0.0)
    assert np.all(layer.running_var > 0)


def test_batchnorm_standardizes_moments():
    r = _rng(2)
    x = r.standard_normal((64, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True) * 2 + 2
    layer = batchnorm_layer(3, dtype=np.float64)
    out = batchnorm_stats(Tensor(x), layer, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)
    np.testing.assert_allclose(layer.running_mean, 0.2, atol=1e-12)


def test_batchnorm_eval_identity():
    layer = batchnorm_layer(3, eps=0.0, dtype=np.float64)
    layer.weight.data[:] = [2.0, 1.0, 0.5]
    layer.bias.data[:] = [0.0, 1.0, -1.0]
    x = _rng().standard_normal((2, 3, 4))
    out = batchnorm_stats(Tensor(x), layer, training=False).data
    np.testing.assert_allclose(out, x * layer.weight.data[None, :, None] + layer.bias.data[None, :, None])


def test_batchnorm_rejects_bad_running_var():
    with pytest.raises(ValueError):
        LayerParams("batchnorm", Tensor(np.ones(2)), Tensor(np.zeros(2)), running_var=np.array([1.0, 0.0]))


# ---------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(
    size=st.integers(4, 20),
    kernel=st.integers(1, 5),
    stride=st.integers(1, 3),
    pad=st.integers(0, 2),
)
def test_conv_shape_algebra(size, kernel, stride, pad):
    expected = (size + 2 * pad - kernel) // stride + 1
    if expected < 1:
        return
    x = Tensor(np.zeros((1, 1, size, size + 1)))
    w = Tensor(np.zeros((2, 1, kernel, kernel)))
    out = F.conv2d(x, w, stride=stride, padding=pad)
    assert out.shape == (1, 2, expected, (size + 1 + 2 * pad - kernel) // stride + 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.integers(0, 2))
def test_softmax_rows_and_nonnegative_loss(logits, target):
    loss, probs = softmax_cross_entropy(Tensor([logits]), [target])
    assert abs(probs.sum() - 1.0) < 1e-9
    assert loss.item() >= 0.0


def test_determinism_bit_identical():
    def run():
        layer = conv2d_layer(3, 5, 3, np.random.default_rng(7), padding=1)
        x = Tensor(np.random.default_rng(8).standard_normal((2, 3, 9, 9)).astype(np.float32))
        return forward(layer, x).data

    assert run().tobytes() == run().tobytes()


def test_checkpoint_roundtrip(tmp_path):
    r = _rng()
    arrays = {"a.weight": ("conv2d", r.standard_normal((2, 3, 3, 3))), "b.bias": ("linear", r.standard_normal(5))}
    save_checkpoint(tmp_path / "m.ckpt", arrays, {"kind": "toy"})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"kind": "toy"}
    assert list(loaded) == list(arrays)
    for name, (kind, arr) in arrays.items():
        assert loaded[name][0] == kind
        np.testing.assert_array_equal(loaded[name][1], arr.astype(np.float32))
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"LCCK"
