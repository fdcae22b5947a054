import math

import numpy as np
import pytest

from gaze_world import numcore as nc
from gaze_world.numcore import GradientError, ShapeError, Tensor


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b, w: (nc.add(a, b) * w).sum(),
        lambda a, b, w: (nc.sub(a, b) * w).sum(),
        lambda a, b, w: (nc.mul(a, b) * w).sum(),
        lambda a, b, w: (nc.div(a, nc.exp(b)) * w).sum(),
        lambda a, b, w: (nc.tanh(a) * w).sum(),
        lambda a, b, w: (nc.gelu(a) * w).sum(),
        lambda a, b, w: (nc.log(nc.exp(a) + 1.0) * w).sum(),
        lambda a, b, w: (nc.softmax(a) * w).sum(),
        lambda a, b, w: (nc.transpose(nc.matmul(a, nc.transpose(b))) * 1.0).sum(),
        lambda a, b, w: (nc.reshape(a, (12,)) * nc.reshape(w, (12,))).sum(),
        lambda a, b, w: (nc.concat([a, b], axis=0) * nc.concat([w, w], axis=0)).sum(),
        lambda a, b, w: (nc.take(a, [2, 0, 2]) * nc.tanh(b)).sum(),
        lambda a, b, w: (nc.masked_fill(a, np.eye(3, 4, dtype=bool), 0.0) * w).sum(),
        lambda a, b, w: nc.mean(a * b, axis=1).sum(),
    ],
)
def test_elementwise_and_shape_ops_pass_gradient_check(rng, build):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    w = Tensor(rng.normal(size=(3, 4)))
    assert nc.grad_check(lambda: build(a, b, w), [a, b]) < 1e-5


def test_trailing_axis_bias_broadcast_gradient(rng):
    x, bias = _param(rng, 5, 3), _param(rng, 3)
    w = Tensor(rng.normal(size=(5, 3)))
    assert nc.grad_check(lambda: ((x + bias) * w).sum(), [x, bias]) < 1e-5
    assert bias.grad.shape == (3,)


def test_batched_matmul_gradient(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    assert nc.grad_check(lambda: nc.tanh(nc.matmul(a, b)).sum(), [a, b]) < 1e-5


def test_layer_norm_gradient(rng):
    x, gain, bias = _param(rng, 4, 6), _param(rng, 6), _param(rng, 6)
    w = Tensor(rng.normal(size=(4, 6)))
    f = lambda: (nc.layer_norm(x, 1e-5, gain, bias) * w).sum()  # noqa: E731
    assert nc.grad_check(f, [x, gain, bias]) < 1e-5


def test_layer_norm_output_is_standardised(rng):
    y = nc.layer_norm(Tensor(rng.normal(3.0, 2.0, size=(5, 16)))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-5)


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_smooth_l1_gradient_and_value(rng, beta):
    pred, target = _param(rng, 4, 3), Tensor(rng.normal(size=(4, 3)) * 2.0)
    assert nc.grad_check(lambda: nc.smooth_l1(pred, target, beta), [pred]) < 1e-5
    d = np.abs(pred.data - target.data)
    expected = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()
    assert nc.smooth_l1(pred, target, beta).item() == pytest.approx(expected, rel=1e-12)


def test_classification_losses_gradient(rng):
    logits = _param(rng, 4, 5)
    assert nc.grad_check(lambda: nc.cross_entropy(logits, [0, 4, 2, 2]), [logits]) < 1e-5
    flags = _param(rng, 6)
    targets = np.array([0, 1, 1, 0, 1, 0])
    assert nc.grad_check(lambda: nc.bce_with_logits(flags, targets), [flags]) < 1e-5
    pred = _param(rng, 6)
    goal = Tensor(rng.normal(size=6))
    assert nc.grad_check(lambda: nc.l1_loss(pred, goal), [pred]) < 1e-5


def test_cross_entropy_of_uniform_logits_is_log_n():
    for n in (2, 4, 16):
        value = nc.cross_entropy(Tensor(np.zeros((3, n))), [0, 1, n - 1]).item()
        assert abs(value - math.log(n)) < 1e-9


def test_bce_matches_closed_form():
    x = np.array([-3.0, 0.0, 2.5])
    t = np.array([1.0, 0.0, 1.0])
    expected = -(t * np.log(1 / (1 + np.exp(-x))) + (1 - t) * np.log(1 - 1 / (1 + np.exp(-x))))
    assert nc.bce_with_logits(Tensor(x), t).item() == pytest.approx(expected.mean(), rel=1e-12)


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, -2.0], requires_grad=True)
    nc.backward((x * x).sum())
    nc.backward((x * x).sum())
    assert x.grad.tolist() == [4.0, -8.0]
    nc.zero_grad([x])
    assert x.grad.tolist() == [0.0, 0.0]


def test_shared_subexpression_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    nc.backward((y + y * 3.0).sum())
    assert x.grad.tolist() == [16.0]


def test_no_grad_and_stop_gradient_cut_the_graph():
    w = Tensor([1.5], requires_grad=True)
    with nc.no_grad():
        assert not nc.is_grad_enabled()
        frozen = w * 2.0
    assert nc.is_grad_enabled()
    assert not frozen.requires_grad
    with pytest.raises(GradientError):
        nc.backward(nc.stop_gradient(w).sum())


def test_backward_needs_a_scalar():
    with pytest.raises(GradientError):
        nc.backward(Tensor(np.ones(3), requires_grad=True) * 1.0)


def test_shape_errors():
    with pytest.raises(ShapeError):
        nc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        nc.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        nc.smooth_l1(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        nc.cross_entropy(Tensor(np.ones((2, 3))), [0])


def test_masked_fill_blocks_gradient():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    mask = np.array([[True, False], [False, True]])
    nc.backward(nc.masked_fill(x, mask, 0.0).sum())
    assert x.grad.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_dtype_is_preserved():
    x = Tensor(np.ones((2, 2)), dtype=np.float32, requires_grad=True)
    y = nc.softmax(nc.matmul(x, x) * 0.5 + 1.0)
    assert y.dtype == np.float32
