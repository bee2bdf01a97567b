import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aaaseg import gradcheck
from aaaseg import ndtensor as nd
from aaaseg.errors import ShapeError, ValidationError

from oracles import conv2d_naive, cross_entropy_naive, maxpool_naive


def params(w, b=None, stride=1, pad=0):
    w = np.asarray(w, dtype=np.float64)
    return nd.ConvParams(w, np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64), stride, pad)


# -- conv ----------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    np.testing.assert_array_equal(nd.conv2d_forward(x, params(w, pad=1)), x)


def test_conv_all_ones_corner_sums():
    out = nd.conv2d_forward(np.ones((1, 1, 2, 2)), params(np.ones((1, 1, 3, 3)), pad=1))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = nd.conv2d_forward(x, params(w, b, pad=1))
    np.testing.assert_allclose(got, conv2d_naive(x, w, b, pad=1), rtol=1e-5, atol=1e-12)


def test_conv_strided_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(3, 2, 2, 2))
    got = nd.conv2d_forward(x, params(w, stride=2))
    np.testing.assert_allclose(got, conv2d_naive(x, w, np.zeros(3), pad=0, stride=2), rtol=1e-10)


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        nd.conv2d_forward(np.zeros((1, 2, 4, 4)), params(np.zeros((1, 3, 3, 3)), pad=1))


def test_conv_backward_zero_grad():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 4, 4))
    p = params(rng.normal(size=(3, 2, 3, 3)), pad=1)
    g = nd.conv2d_backward(x, p, np.zeros((1, 3, 4, 4)))
    assert not g.input_grad.any() and not g.param_grads["weights"].any() and not g.param_grads["bias"].any()


def test_conv_backward_1x1_weight_grad_is_inner_product():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 3, 3))
    og = rng.normal(size=(1, 1, 3, 3))
    g = nd.conv2d_backward(x, params([[[[2.0]]]]), og)
    assert g.param_grads["weights"][0, 0, 0, 0] == pytest.approx(np.sum(x * og), rel=1e-12)


def test_conv_backward_shape_error():
    with pytest.raises(ShapeError):
        nd.conv2d_backward(np.zeros((1, 1, 4, 4)), params(np.zeros((2, 1, 3, 3)), pad=1), np.zeros((1, 2, 3, 3)))


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 4, 4))
    p = params(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), pad=1)
    obj = lambda: float(nd.conv2d_forward(x, p).sum())
    g = nd.conv2d_backward(x, p, np.ones((1, 2, 4, 4)))
    assert gradcheck.rel_error(g.input_grad, gradcheck.numeric_grad(obj, x)) < 1e-3
    assert gradcheck.rel_error(g.param_grads["weights"], gradcheck.numeric_grad(obj, p.weights)) < 1e-3


def test_conv_preserves_float32():
    x = np.ones((1, 1, 4, 4), dtype=np.float32)
    p = nd.ConvParams(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32), 1, 1)
    assert nd.conv2d_forward(x, p).dtype == np.float32


# -- pooling -------------------------------------------------------------------

def test_maxpool_single_window():
    out, amap = nd.maxpool2_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out[0, 0, 0, 0] == 4.0
    assert divmod(int(amap[0, 0, 0, 0]), 2) == (1, 1)


def test_maxpool_ties_take_first_element():
    out, amap = nd.maxpool2_forward(np.full((1, 1, 4, 4), 7.0))
    assert np.all(out == 7.0) and np.all(amap == 0)


@pytest.mark.parametrize("seed", range(3))
def test_maxpool_matches_oracle(seed):
    x = np.random.default_rng(seed).normal(size=(1, 2, 8, 8))
    np.testing.assert_array_equal(nd.maxpool2_forward(x)[0], maxpool_naive(x))


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ShapeError):
        nd.maxpool2_forward(np.zeros((1, 1, 3, 4)))


def test_maxpool_backward_routes_to_argmax():
    _, amap = nd.maxpool2_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    g = nd.maxpool2_backward(amap, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(g, [[[[0, 0], [0, 1]]]])
    assert not nd.maxpool2_backward(amap, np.zeros((1, 1, 1, 1))).any()


def test_maxpool_backward_shape_mismatch():
    _, amap = nd.maxpool2_forward(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ShapeError):
        nd.maxpool2_backward(amap, np.zeros((1, 1, 1, 1)))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_maxpool_backward_conserves_mass(seed):
    rng = np.random.default_rng(seed)
    _, amap = nd.maxpool2_forward(rng.normal(size=(2, 3, 4, 6)))
    og = rng.normal(size=amap.shape)
    assert nd.maxpool2_backward(amap, og).sum() == pytest.approx(og.sum(), abs=1e-9)


# -- deconvolution -------------------------------------------------------------

def test_deconv_single_pixel_spreads():
    out = nd.deconv2_forward(np.full((1, 1, 1, 1), 2.5), params(np.ones((1, 1, 2, 2)), stride=2))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 2.5))


def test_deconv_zero_input():
    rng = np.random.default_rng(0)
    out = nd.deconv2_forward(np.zeros((1, 3, 2, 2)), params(rng.normal(size=(2, 3, 2, 2)), stride=2))
    assert out.shape == (1, 2, 4, 4) and not out.any()


@pytest.mark.parametrize("seed", range(5))
def test_deconv_is_adjoint_of_stride2_conv(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 3, 2, 2))
    x = rng.normal(size=(2, 3, 3, 5))
    y = rng.normal(size=(2, 4, 6, 10))
    lhs = np.sum(nd.deconv2_forward(x, params(w, stride=2)) * y)
    rhs = np.sum(x * nd.conv2d_forward(y, params(w.transpose(1, 0, 2, 3), stride=2)))
    assert lhs == pytest.approx(rhs, rel=1e-4)


def test_deconv_rejects_wrong_kernel():
    with pytest.raises(ShapeError):
        nd.deconv2_forward(np.zeros((1, 1, 2, 2)), params(np.zeros((1, 1, 3, 3)), stride=2))


# -- relu / softmax / loss / concat -------------------------------------------

def test_relu():
    np.testing.assert_array_equal(nd.relu_forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(nd.relu_backward(np.array([-1.0, 2.0]), np.array([5.0, 5.0])), [0, 5])
    assert nd.relu_backward(np.array([0.0]), np.array([3.0]))[0] == 0


def test_softmax_equal_logits():
    np.testing.assert_allclose(nd.softmax_channels(np.zeros((1, 2, 1, 1))).ravel(), [0.5, 0.5])


def test_softmax_closed_form():
    p = nd.softmax_channels(np.array([0.0, math.log(3.0)]).reshape(1, 2, 1, 1))
    np.testing.assert_allclose(p.ravel(), [0.25, 0.75], rtol=1e-12)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_softmax_sums_to_one_and_is_shift_invariant(seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(2, 3, 4, 4))
    p = nd.softmax_channels(x)
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-6
    assert p.min() >= 0 and p.max() <= 1
    np.testing.assert_allclose(nd.softmax_channels(x + 1000.0), p, atol=1e-6)


def test_loss_zero_when_certain():
    g = nd.one_hot(np.array([[[0, 1], [1, 0]]]), dtype=np.float64)
    loss, grad = nd.cross_entropy_loss(g.copy(), g)
    assert loss == 0.0 and not grad.any()


def test_loss_uniform_2x2():
    g = nd.one_hot(np.array([[[0, 1], [1, 1]]]), dtype=np.float64)
    loss, _ = nd.cross_entropy_loss(np.full((1, 2, 2, 2), 0.5), g)
    assert loss == pytest.approx(4 * math.log(2), rel=1e-12)
    assert loss == pytest.approx(2.7726, abs=1e-4)


def test_loss_single_pixel():
    p = np.array([0.75, 0.25]).reshape(1, 2, 1, 1)
    g = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
    assert nd.cross_entropy_loss(p, g)[0] == pytest.approx(math.log(4), rel=1e-12)


def test_loss_is_a_sum_matching_the_triple_sum_oracle():
    rng = np.random.default_rng(11)
    p = nd.softmax_channels(rng.normal(size=(1, 2, 5, 7)))
    g = nd.one_hot(rng.integers(0, 2, size=(1, 5, 7)), dtype=np.float64)
    assert nd.cross_entropy_loss(p, g)[0] == pytest.approx(cross_entropy_naive(p, g), rel=1e-12)


def test_loss_clamps_log():
    p = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    g = np.array([0.0, 1.0]).reshape(1, 2, 1, 1)
    loss, _ = nd.cross_entropy_loss(p, g)
    assert loss == pytest.approx(-math.log(1e-12))


def test_loss_validation():
    with pytest.raises(ShapeError):
        nd.cross_entropy_loss(np.full((1, 2, 2, 2), 0.5), np.zeros((1, 2, 2, 3)))
    with pytest.raises(ValidationError):
        nd.cross_entropy_loss(np.full((1, 2, 1, 1), 0.5), np.ones((1, 2, 1, 1)))


def test_concat_shapes():
    a, b = np.zeros((1, 2, 4, 4)), np.ones((1, 3, 4, 4))
    assert nd.concat_channels(a, b).shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(nd.concat_channels(b, np.zeros((1, 0, 4, 4))), b)
    with pytest.raises(ShapeError):
        nd.concat_channels(a, np.zeros((1, 1, 4, 5)))


def test_concat_backward_finite_differences():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 1, 3, 3))
    r = rng.normal(size=(1, 3, 3, 3))
    obj = lambda: float(np.sum(nd.concat_channels(a, b) * r))
    ga, gb = nd.concat_backward(r, 2)
    assert gradcheck.rel_error(ga, gradcheck.numeric_grad(obj, a)) < 1e-3
    assert gradcheck.rel_error(gb, gradcheck.numeric_grad(obj, b)) < 1e-3
    assert ga.sum() + gb.sum() == pytest.approx(r.sum())


def test_every_layer_passes_gradcheck():
    for r in gradcheck.layer_checks(seed=4):
        assert r.passed, r.line()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_loss_is_non_negative_and_zero_only_when_exact(seed):
    rng = np.random.default_rng(seed)
    p = nd.softmax_channels(rng.normal(scale=4, size=(1, 2, 3, 4)))
    g = nd.one_hot(rng.integers(0, 2, size=(1, 3, 4)), dtype=np.float64)
    loss, _ = nd.cross_entropy_loss(p, g)
    assert loss > 0
    assert nd.cross_entropy_loss(g.copy(), g)[0] == 0.0
