import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geofcn import _kernels_py, kernels
from geofcn.tensor import (
    ConvParams,
    NonFiniteGradient,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    conv_output_extent,
    relu,
    relu_backward,
    sgd_step,
    softmax,
    softmax_cross_entropy,
    upsample_backward,
    upsample_nearest,
)


def naive_conv(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation with zero padding."""
    l, h, wd = x.shape
    k, _, m, n = w.shape
    ho = (h + 2 * pad - m) // stride + 1
    wo = (wd + 2 * pad - n) // stride + 1
    y = np.zeros((k, ho, wo))
    for kk in range(k):
        for i in range(ho):
            for j in range(wo):
                acc = b[kk]
                for ll in range(l):
                    for mm in range(m):
                        for nn in range(n):
                            r, c = i * stride + mm - pad, j * stride + nn - pad
                            if 0 <= r < h and 0 <= c < wd:
                                acc += x[ll, r, c] * w[kk, ll, mm, nn]
                y[kk, i, j] = acc
    return y


# --- conv forward ------------------------------------------------------------


def test_conv_identity_1x1():
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    assert conv2d_forward(np.array([[[2.0]]]), p).tolist() == [[[2.0]]]


def test_conv_all_ones_2x2_gives_fours():
    p = ConvParams(np.ones((1, 1, 2, 2)), np.zeros(1))
    y = conv2d_forward(np.ones((1, 3, 3)), p)
    assert y.shape == (1, 2, 2)
    assert np.all(y == 4.0)


def test_conv_bias_only():
    rng = np.random.default_rng(1)
    p = ConvParams(np.zeros((2, 3, 3, 3)), np.full(2, 0.5), padding=1)
    assert np.all(conv2d_forward(rng.standard_normal((3, 6, 5)), p) == 0.5)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    l=st.integers(1, 3),
    k=st.integers(1, 3),
    m=st.integers(1, 4),
    stride=st.integers(1, 2),
    pad=st.integers(0, 2),
)
def test_conv_matches_nested_loop_oracle(seed, l, k, m, stride, pad):
    rng = np.random.default_rng(seed)
    size = m + stride * 2 - 2 * pad
    if size < 1:
        size += stride * 2
    x = rng.standard_normal((l, size, size + stride))
    w = rng.standard_normal((k, l, m, m))
    b = rng.standard_normal(k)
    p = ConvParams(w, b, stride, pad)
    np.testing.assert_allclose(conv2d_forward(x, p), naive_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_same_padding_preserves_extent():
    p = ConvParams(np.ones((4, 2, 3, 3)), np.zeros(4), 1, 1)
    assert conv2d_forward(np.ones((2, 7, 9)), p).shape == (4, 7, 9)


def test_conv_linearity_without_bias():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 8))
    p = ConvParams(rng.standard_normal((3, 2, 3, 3)), np.zeros(3), 1, 1)
    np.testing.assert_allclose(conv2d_forward(2.5 * x, p), 2.5 * conv2d_forward(x, p), rtol=0, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    p = ConvParams(np.ones((1, 2, 1, 1)), np.zeros(1))
    with pytest.raises(ShapeError, match="channels"):
        conv2d_forward(np.ones((3, 4, 4)), p)


def test_conv_rejects_non_integer_extent():
    p = ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1), stride=2, padding=1)
    with pytest.raises(ShapeError, match="non-integer"):
        conv2d_forward(np.ones((1, 8, 8)), p)
    assert conv_output_extent(8, 4, 2, 1) == 4


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(weights=np.ones((1, 1, 1)), bias=np.zeros(1)),
        dict(weights=np.ones((2, 1, 1, 1)), bias=np.zeros(1)),
        dict(weights=np.ones((1, 1, 1, 1)), bias=np.zeros(1), stride=0),
        dict(weights=np.ones((1, 1, 1, 1)), bias=np.zeros(1), padding=-1),
    ],
)
def test_conv_params_validation(kwargs):
    with pytest.raises(ShapeError):
        ConvParams(**kwargs)


# --- conv backward ------------------------------------------------------------


def test_conv_backward_identity_case():
    p = ConvParams(np.ones((1, 1, 1, 1)), np.zeros(1))
    dx, dw, db = conv2d_backward(np.array([[[2.0]]]), p, np.array([[[1.0]]]))
    assert dx.tolist() == [[[1.0]]]
    assert dw.reshape(-1).tolist() == [2.0]
    assert db.tolist() == [1.0]


def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(0)
    p = ConvParams(rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2), 1, 1)
    dx, dw, db = conv2d_backward(rng.standard_normal((1, 4, 4)), p, np.zeros((2, 4, 4)))
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_backward_rejects_bad_upstream_shape():
    p = ConvParams(np.ones((2, 1, 3, 3)), np.zeros(2), 1, 1)
    with pytest.raises(ShapeError, match="upstream"):
        conv2d_backward(np.ones((1, 4, 4)), p, np.ones((2, 3, 3)))


@pytest.mark.parametrize("stride,pad,m", [(1, 1, 3), (2, 1, 4), (1, 0, 2)])
def test_conv_backward_matches_finite_differences(stride, pad, m):
    # the objective is linear in every argument, so central differences are exact up to rounding
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 4, 4))
    w = rng.standard_normal((2, 1, m, m))
    b = rng.standard_normal(2)
    p = ConvParams(w, b, stride, pad)
    up = rng.standard_normal(conv2d_forward(x, p).shape)
    dx, dw, db = conv2d_backward(x, p, up)
    h = 1e-3

    def obj(xx, ww, bb):
        return float(np.sum(up * conv2d_forward(xx, ConvParams(ww, bb, stride, pad))))

    for arr, grad, slot in ((x, dx, 0), (w, dw, 1), (b, db, 2)):
        for idx in np.ndindex(arr.shape):
            args = [x, w, b]
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            args[slot] = plus
            fp = obj(*args)
            args[slot] = minus
            fm = obj(*args)
            fd = (fp - fm) / (2 * h)
            assert abs(fd - grad[idx]) <= 1e-5 * max(abs(fd), abs(grad[idx]), 1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stride=st.integers(1, 2))
def test_conv_backward_is_adjoint_of_forward(seed, stride):
    # <conv(x), g> (bias 0) == <x, conv^T(g)>
    rng = np.random.default_rng(seed)
    m = 2 + stride
    x = rng.standard_normal((2, 3, 8, 8))
    p = ConvParams(rng.standard_normal((3, 3, m, m)), np.zeros(3), stride, 1)
    try:
        y = conv2d_forward(x, p)
    except ShapeError:
        return
    g = rng.standard_normal(y.shape)
    dx, _, _ = conv2d_backward(x, p, g)
    assert math.isclose(float(np.sum(y * g)), float(np.sum(x * dx)), rel_tol=1e-10, abs_tol=1e-10)


# --- kernel backends ------------------------------------------------------------


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_compiled_kernels_bit_identical_to_fallback(seed, m, stride, pad):
    from geofcn import _kernels

    rng = np.random.default_rng(seed)
    h = m + 3 * stride
    x = rng.standard_normal((2, 3, h, h + stride))
    if (h + 2 * pad - m) % stride or (h + stride + 2 * pad - m) % stride:
        return
    a = _kernels_py.im2col(x, m, m, stride, pad)
    assert np.array_equal(a, _kernels.im2col(x, m, m, stride, pad))
    assert np.array_equal(_kernels_py.col2im(a, x.shape, m, m, stride, pad), _kernels.col2im(a, x.shape, m, m, stride, pad))
    plane = rng.standard_normal((h, h + 1)).astype(np.float32)
    assert np.array_equal(_kernels_py.median3x3(plane), _kernels.median3x3(plane))
    t, q = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
    assert np.array_equal(_kernels_py.confusion_counts(t, q, 5), _kernels.confusion_counts(t, q, 5))


# --- relu ------------------------------------------------------------------------


def test_relu_examples():
    assert relu(np.array([-3.0, 0.0, 5.0])).tolist() == [0.0, 0.0, 5.0]
    assert not relu(-np.arange(1.0, 6.0)).any()
    assert relu_backward(np.array([-1.0, 2.0]), np.array([10.0, 10.0])).tolist() == [0.0, 10.0]


def test_relu_derivative_at_zero_is_zero():
    assert relu_backward(np.array([0.0]), np.array([3.0])).tolist() == [0.0]


# --- upsampling --------------------------------------------------------------------


def test_upsample_example():
    out = upsample_nearest(np.array([[1.0, 2.0], [3.0, 4.0]]), 2)
    assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]


@pytest.mark.parametrize("s", [2, 3, 4])
def test_upsample_floor_index_law(s):
    x = np.random.default_rng(s).standard_normal((2, 5, 7))
    y = upsample_nearest(x, s)
    assert y.shape == (2, 5 * s, 7 * s)
    for k, i, j in np.ndindex(y.shape):
        assert y[k, i, j] == x[k, i // s, j // s]


def test_upsample_identity_and_rejects_zero():
    x = np.random.default_rng(0).standard_normal((1, 3, 3))
    assert np.array_equal(upsample_nearest(x, 1), x)
    with pytest.raises(ValueError):
        upsample_nearest(x, 0)
    with pytest.raises(ValueError):
        upsample_backward(x, 0)


def test_upsample_backward_block_sum():
    assert upsample_backward(np.ones((1, 4, 4)), 2).tolist() == [[[4.0, 4.0], [4.0, 4.0]]]


# --- softmax / cross-entropy ----------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((4, 3, 5)), np.zeros((3, 5), dtype=int))
    assert abs(loss - math.log(4)) < 1e-12


def test_cross_entropy_saturated():
    labels = np.random.default_rng(0).integers(0, 4, (3, 3))
    logits = np.zeros((4, 3, 3))
    for (i, j), c in np.ndenumerate(labels):
        logits[c, i, j] = 1000.0
    loss, _ = softmax_cross_entropy(logits, labels)
    assert loss < 1e-6


def test_cross_entropy_two_class_value():
    logits = np.array([0.0, math.log(3.0)]).reshape(2, 1, 1)
    loss, grad = softmax_cross_entropy(logits, np.array([[1]]))
    assert abs(loss - (-math.log(0.75))) < 1e-12
    np.testing.assert_allclose(grad.reshape(-1), [0.25, -0.25], atol=1e-15)


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((2, 3, 4, 4))
    t = rng.integers(0, 3, (2, 4, 4))
    _, g = softmax_cross_entropy(z, t)
    h = 1e-5
    for idx in [(0, 0, 0, 0), (1, 2, 3, 1), (0, 1, 2, 2)]:
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        fd = (softmax_cross_entropy(zp, t)[0] - softmax_cross_entropy(zm, t)[0]) / (2 * h)
        assert abs(fd - g[idx]) < 1e-9


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels"):
        softmax_cross_entropy(np.zeros((3, 2, 2)), np.full((2, 2), 3))
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((3, 2, 2)), np.full((2, 2), -1))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 500))
def test_softmax_sums_to_one(seed, scale):
    z = np.random.default_rng(seed).standard_normal((5, 3, 4)) * scale
    p = softmax(z)
    assert np.all(np.isfinite(p))
    assert np.max(np.abs(p.sum(axis=0) - 1.0)) <= 1e-12


# --- sgd --------------------------------------------------------------------------------


def test_sgd_examples():
    assert math.isclose(sgd_step([np.array(1.0)], [np.array(0.5)], 0.1)[0], 0.95, rel_tol=0, abs_tol=1e-15)
    assert math.isclose(sgd_step([np.array(2.0)], [np.array(0.0)], 0.1, l2=0.5)[0], 1.8, rel_tol=0, abs_tol=1e-15)
    theta = np.array([1.5, -2.0, 0.0])
    assert np.array_equal(sgd_step([theta], [np.zeros(3)], 0.3)[0], theta)


def test_sgd_l1_uses_sign_with_zero_at_zero():
    out = sgd_step([np.array([2.0, -2.0, 0.0])], [np.zeros(3)], 0.5, l1=0.2)[0]
    assert out.tolist() == [1.9, -1.9, 0.0]


def test_sgd_rejects_non_finite_gradient_and_bad_rate():
    with pytest.raises(NonFiniteGradient):
        sgd_step([np.zeros(2)], [np.array([0.0, np.nan])], 0.1)
    with pytest.raises(ValueError):
        sgd_step([np.zeros(2)], [np.zeros(2)], 0.0)
