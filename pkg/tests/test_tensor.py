import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smallobj.tensor import (ConvSpec, activation, concat_channels, conv2d, conv_output_size,
                             global_pool, init_conv, l2_normalize, linear, mish, pool2d, sigmoid,
                             upsample_nearest)


def naive_conv(x, w, b, stride, pad, dil):
    """Seven nested loops, straight from the definition."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            y = i * stride - pad + ky * dil
                            xx = j * stride - pad + kx * dil
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += w[oc, ic, ky, kx] * x[ic, y, xx]
                out[oc, i, j] = acc
    return out


def spec(w, b=None, **kw):
    w = np.asarray(w, dtype=float)
    return ConvSpec(w, np.zeros(w.shape[0]) if b is None else b, **kw)


def test_conv_center_of_ones():
    y = conv2d(np.ones((1, 5, 5)), spec(np.ones((1, 1, 3, 3)), padding=1))
    assert y.shape == (1, 5, 5)
    assert y[0, 2, 2] == 9.0


def test_conv_dilated_keeps_80():
    x = np.zeros((8, 80, 80))
    y = conv2d(x, spec(np.zeros((4, 8, 3, 3)), padding=2, dilation=2))
    assert y.shape == (4, 80, 80)
    assert conv_output_size(80, 3, 1, 2, 2) == 80


def test_conv_stride2_640():
    x = np.zeros((3, 640, 640))
    y = conv2d(x, spec(np.zeros((1, 3, 3, 3)), stride=2, padding=1))
    assert y.shape == (1, 320, 320)


@pytest.mark.parametrize("stride,pad,dil,k", [(1, 0, 1, 1), (1, 1, 1, 3), (2, 1, 1, 3),
                                              (1, 2, 2, 3), (3, 0, 1, 3), (1, 4, 2, 5),
                                              (2, 0, 1, 1)])
def test_conv_matches_naive_loops(nprng, stride, pad, dil, k):
    x = nprng.normal(size=(3, 9, 11))
    w = nprng.normal(size=(2, 3, k, k))
    b = nprng.normal(size=2)
    got = conv2d(x, ConvSpec(w, b, stride, pad, dil))
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad, dil), atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValueError, match="input channels"):
        conv2d(np.zeros((2, 4, 4)), spec(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="output would be"):
        conv2d(np.zeros((1, 2, 2)), spec(np.zeros((1, 1, 5, 5))))
    with pytest.raises(ValueError, match="odd"):
        spec(np.zeros((1, 1, 2, 2)))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 24), w=st.integers(1, 24), k=st.sampled_from([1, 3, 5]),
       s=st.integers(1, 3), p=st.integers(0, 3), d=st.integers(1, 3))
def test_conv_shape_formula(h, w, k, s, p, d):
    sp = spec(np.zeros((2, 1, k, k)), stride=s, padding=p, dilation=d)
    ho = (h + 2 * p - d * (k - 1) - 1) // s + 1
    wo = (w + 2 * p - d * (k - 1) - 1) // s + 1
    if ho < 1 or wo < 1:
        with pytest.raises(ValueError):
            conv2d(np.zeros((1, h, w)), sp)
    else:
        assert conv2d(np.zeros((1, h, w)), sp).shape == (2, ho, wo)


def test_conv_linearity(nprng, rng):
    sp = init_conv(rng, 4, 5, 3, dilation=2)
    x, y = nprng.uniform(-1, 1, (2, 4, 12, 12))
    a, b = 0.7, -1.3
    np.testing.assert_allclose(conv2d(a * x + b * y, sp), a * conv2d(x, sp) + b * conv2d(y, sp),
                               atol=1e-9, rtol=0)


def test_conv_is_pure(nprng, rng):
    sp = init_conv(rng, 3, 4, 3)
    x = nprng.normal(size=(3, 16, 16))
    x_copy = x.copy()
    assert np.array_equal(conv2d(x, sp), conv2d(x, sp))
    assert np.array_equal(x, x_copy)


def test_pool_examples():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert pool2d(x, "max", 2, 2).tolist() == [[[4.0]]]
    assert pool2d(x, "avg", 2, 2).tolist() == [[[2.5]]]
    with pytest.raises(ValueError):
        pool2d(x, "max", 3, 1)


def test_pool_overlapping_windows():
    x = np.arange(16.0).reshape(1, 4, 4)
    assert pool2d(x, "max", 3, 1).tolist() == [[[10.0, 11.0], [14.0, 15.0]]]


def test_global_pool():
    assert global_pool(np.full((3, 4, 4), 3.0), "max").tolist() == [3.0] * 3
    assert global_pool(np.full((3, 4, 4), 3.0), "avg").tolist() == [3.0] * 3
    x = np.array([[[-1.0, 5.0]]])
    assert global_pool(x, "max")[0] == 5.0 and global_pool(x, "avg")[0] == 2.0
    p = np.array([[[7.5]]])
    assert global_pool(p, "max")[0] == global_pool(p, "avg")[0] == 7.5


def test_activation_values():
    assert sigmoid(0.0) == 0.5
    assert mish(0.0) == 0.0
    want = float(mpmath.mpf(1) * mpmath.tanh(mpmath.log(1 + mpmath.e)))
    assert abs(want - 0.8650984) < 1e-7
    assert abs(float(mish(1.0)) - want) < 1e-15
    assert activation(np.array([-2.0, 3.0]), "leaky_relu").tolist() == [-0.2, 3.0]
    assert activation(np.array([-2.0, 3.0]), "relu").tolist() == [0.0, 3.0]
    with pytest.raises(ValueError):
        activation(0.0, "gelu")


def test_mish_limits_and_monotone():
    xs = np.linspace(0, 20, 2001)
    assert np.all(np.diff(mish(xs)) > 0)
    assert abs(mish(-20.0)) < 1e-6
    assert abs(mish(20.0) - 20.0) < 1e-12
    big = mish(np.array([-1e5, 1e5, -800.0, 800.0]))
    assert np.all(np.isfinite(big))
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))


def test_upsample():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    y = upsample_nearest(x, 2)
    assert y[0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    assert np.array_equal(upsample_nearest(x, 1), x)
    assert np.array_equal(upsample_nearest(np.full((1, 1, 1), 2.0), 4), np.full((1, 4, 4), 2.0))


def test_concat():
    y = concat_channels([np.zeros((3, 8, 8)), np.ones((5, 8, 8))])
    assert y.shape == (8, 8, 8)
    assert y[:3].sum() == 0 and y[3:].min() == 1
    x = np.ones((2, 4, 4))
    assert np.array_equal(concat_channels([x]), x)
    with pytest.raises(ValueError, match="spatial"):
        concat_channels([np.zeros((1, 8, 8)), np.zeros((1, 4, 4))])


def test_l2_normalize_examples():
    x = np.array([3.0, 4.0]).reshape(2, 1, 1)
    np.testing.assert_allclose(l2_normalize(x, 1.0).ravel(), [0.6, 0.8], atol=1e-15)
    z = l2_normalize(np.zeros((3, 2, 2)), 1.0)
    assert np.array_equal(z, np.zeros((3, 2, 2)))


def test_l2_normalize_norm_bound(nprng):
    x = nprng.normal(size=(6, 5, 5)) * 10
    scale = nprng.uniform(0.1, 2.0, 6)
    y = l2_normalize(x, scale)
    norms = np.sqrt((y ** 2).sum(axis=0))
    assert norms.max() <= scale.max() + 1e-12
    # direct per-pixel oracle
    for i in range(5):
        for j in range(5):
            v = x[:, i, j]
            np.testing.assert_allclose(y[:, i, j], v / math.sqrt(float(v @ v)) * scale, rtol=1e-12)


def test_l2_normalize_idempotent(nprng):
    x = nprng.normal(size=(4, 3, 3))
    u = l2_normalize(x, 1.0)
    np.testing.assert_allclose(l2_normalize(u, 1.0), u, atol=1e-12, rtol=0)


def test_linear():
    v = np.array([1.5, -2.0])
    assert np.array_equal(linear(v, np.eye(2), np.zeros(2)), v)
    assert linear(v, np.zeros((3, 2)), np.array([1.0, 2.0, 3.0])).tolist() == [1.0, 2.0, 3.0]
    assert linear(np.ones(2), [[1, 2], [3, 4]], np.zeros(2)).tolist() == [3.0, 7.0]
    with pytest.raises(ValueError):
        linear(np.ones(3), np.eye(2), np.zeros(2))


def test_init_conv_is_he_uniform(rng):
    sp = init_conv(rng, 16, 32, 3)
    bound = math.sqrt(6 / (16 * 9))
    assert np.abs(sp.weights).max() <= bound
    assert np.all(sp.bias == 0)
    assert np.array_equal(sp.weights, sp.weights.astype(np.float32).astype(np.float64))
    assert not sp.weights.flags.writeable
