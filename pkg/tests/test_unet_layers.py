import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowncut.unet import layers as L


def naive_conv(x, w, b):
    n, h, wd, c = x.shape
    k, _, kh, kw = w.shape
    out = np.zeros((n, h - kh + 1, wd - kw + 1, k))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = x[:, i:i + kh, j:j + kw, :]            # n, kh, kw, c
            out[:, i, j, :] = np.einsum("nabc,kcab->nk", patch, w) + b
    return out


def _fd_linear(f, x, r, h=1e-6):
    """Numerical gradient of ``sum(r * f(x))`` w.r.t. ``x``."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        p = np.sum(r * f(x))
        flat[i] = o - h
        m = np.sum(r * f(x))
        flat[i] = o
        gf[i] = (p - m) / (2 * h)
    return g


# -- convolution ---------------------------------------------------------


def test_conv_hand_5x5():
    x = np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1)
    y, _ = L.conv_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    expected = np.array([[54, 63, 72], [99, 108, 117], [144, 153, 162]], dtype=float)
    np.testing.assert_allclose(y[0, ..., 0], expected, atol=1e-12)
    centre = np.zeros((1, 1, 3, 3))
    centre[0, 0, 1, 1] = 1
    y, _ = L.conv_forward(x, centre, np.array([0.5]))
    np.testing.assert_allclose(y[0, ..., 0], x[0, 1:4, 1:4, 0] + 0.5, atol=1e-12)


def test_conv_is_cross_correlation():
    # a kernel with a single tap at (0, 0) reads the top-left neighbour
    x = np.random.default_rng(0).random((1, 6, 6, 1))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1
    y, _ = L.conv_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(y[0, ..., 0], x[0, :4, :4, 0])


@given(st.integers(1, 2), st.integers(4, 9), st.integers(4, 9), st.sampled_from([1, 3, 12]),
       st.integers(1, 5), st.sampled_from([1, 3]), st.integers(0, 2 ** 16))
def test_conv_matches_naive(n, h, w, c, k, ks, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, h, w, c))
    wt = rng.normal(size=(k, c, ks, ks))
    b = rng.normal(size=k)
    y, _ = L.conv_forward(x, wt, b)
    np.testing.assert_allclose(y, naive_conv(x, wt, b), rtol=1e-10, atol=1e-10)


def test_conv_blocked_path_large_input():
    # more rows than one GEMM block and more im2col columns than the wide path allows
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 40, 40, 16))
    wt = rng.normal(size=(8, 16, 3, 3))
    b = rng.normal(size=8)
    y, _ = L.conv_forward(x, wt, b)
    np.testing.assert_allclose(y, naive_conv(x, wt, b), rtol=1e-9, atol=1e-9)


def test_conv_channel_mismatch():
    with pytest.raises(ValueError):
        L.conv_forward(np.zeros((1, 5, 5, 2)), np.zeros((1, 3, 3, 3)), np.zeros(1))


@pytest.mark.parametrize("c,ks", [(2, 3), (16, 3), (3, 1)])
def test_conv_backward_matches_fd(c, ks):
    rng = np.random.default_rng(c)
    x = rng.normal(size=(2, 6, 7, c))
    wt = rng.normal(size=(3, c, ks, ks))
    b = rng.normal(size=3)
    y, cache = L.conv_forward(x, wt, b)
    r = rng.normal(size=y.shape)
    dx, dw, db = L.conv_backward(r, cache)
    np.testing.assert_allclose(dx, _fd_linear(lambda v: L.conv_forward(v, wt, b)[0], x.copy(), r), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(dw, _fd_linear(lambda v: L.conv_forward(x, v, b)[0], wt.copy(), r), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(db, r.sum(axis=(0, 1, 2)), rtol=1e-12)


def test_conv_backward_with_relu_mask():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 6, 6, 2))
    wt = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    y, cache = L.conv_forward(x, wt, b)
    out = L.relu_forward(y)
    r = rng.normal(size=y.shape)
    fused = L.conv_backward(r, cache, relu_out=out)
    plain = L.conv_backward(L.relu_backward(r, out), cache)
    for a, p in zip(fused, plain):
        np.testing.assert_allclose(a, p, rtol=1e-12)
    assert L.conv_backward(r, cache, need_dx=False)[0] is None


# -- pooling -------------------------------------------------------------


def test_maxpool_values_and_routing():
    x = np.array([[1, 3, 0, 0], [2, 0, 5, 5], [7, 7, 1, 1], [7, 7, 1, 2]], dtype=float).reshape(1, 4, 4, 1)
    y, cache = L.maxpool_forward(x)
    assert y[0, ..., 0].tolist() == [[3, 5], [7, 2]]
    dx = L.maxpool_backward(np.array([[10.0, 20.0], [30.0, 40.0]]).reshape(1, 2, 2, 1), cache)
    expected = np.array([[0, 10, 0, 0], [0, 0, 20, 0], [30, 0, 0, 0], [0, 0, 0, 40]], dtype=float)
    np.testing.assert_array_equal(dx[0, ..., 0], expected)


def test_maxpool_gradient_fd():
    rng = np.random.default_rng(2)
    x = rng.permutation(64).astype(float).reshape(1, 4, 4, 4)   # distinct values, no ties
    y, cache = L.maxpool_forward(x)
    r = rng.normal(size=y.shape)
    np.testing.assert_allclose(L.maxpool_backward(r, cache),
                               _fd_linear(lambda v: L.maxpool_forward(v)[0], x.copy(), r, h=1e-3), atol=1e-9)


def test_maxpool_odd_rejected():
    with pytest.raises(ValueError):
        L.maxpool_forward(np.zeros((1, 5, 4, 1)))


# -- up-convolution ------------------------------------------------------


def naive_upconv(x, w, b):
    n, h, wd, c = x.shape
    k = w.shape[0]
    out = np.zeros((n, 2 * h, 2 * wd, k))
    for i in range(h):
        for j in range(wd):
            for a in range(2):
                for bb in range(2):
                    out[:, 2 * i + a, 2 * j + bb, :] = x[:, i, j, :] @ w[:, :, a, bb].T
    return out + b


def test_upconv_matches_naive_and_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 4, 5))
    w = rng.normal(size=(2, 5, 2, 2))
    b = rng.normal(size=2)
    y, cache = L.upconv_forward(x, w, b)
    np.testing.assert_allclose(y, naive_upconv(x, w, b), rtol=1e-12, atol=1e-12)
    r = rng.normal(size=y.shape)
    dx, dw, db = L.upconv_backward(r, cache)
    np.testing.assert_allclose(dx, _fd_linear(lambda v: L.upconv_forward(v, w, b)[0], x.copy(), r), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(dw, _fd_linear(lambda v: L.upconv_forward(x, v, b)[0], w.copy(), r), rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(db, r.sum(axis=(0, 1, 2)))


# -- crop / concat -------------------------------------------------------


def test_crop_concat_and_backward():
    skip = np.arange(2 * 8 * 8 * 3, dtype=float).reshape(2, 8, 8, 3)
    up = -np.ones((2, 4, 4, 2))
    out = L.crop_concat_forward(skip, up)
    assert out.shape == (2, 4, 4, 5)
    np.testing.assert_array_equal(out[..., :3], skip[:, 2:6, 2:6])
    np.testing.assert_array_equal(out[..., 3:], up)
    dy = np.random.default_rng(0).normal(size=out.shape)
    dskip, dup = L.crop_concat_backward(dy, skip.shape, 3)
    np.testing.assert_array_equal(dskip[:, 2:6, 2:6], dy[..., :3])
    assert np.all(dskip[:, :2] == 0) and np.all(dskip[:, 6:] == 0)
    np.testing.assert_array_equal(dup, dy[..., 3:])
    with pytest.raises(ValueError):
        L.crop_concat_forward(np.zeros((1, 7, 7, 1)), up[:1])


# -- softmax / loss ------------------------------------------------------


@given(st.integers(0, 2 ** 16), st.floats(0.1, 50))
def test_softmax_sums_to_one(seed, scale):
    z = np.random.default_rng(seed).normal(size=(3, 5, 4, 2)) * scale
    np.testing.assert_allclose(L.softmax(z).sum(axis=-1), 1.0, atol=1e-9)


def test_uniform_logits_give_ln2():
    loss, grad = L.sparse_cross_entropy(np.zeros((1, 4, 4, 2)), np.random.default_rng(0).integers(0, 2, (1, 4, 4)))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(np.abs(grad), 0.5 / 16)


def test_confident_correct_logits_give_zero_loss():
    t = np.array([[0, 1], [1, 0]])
    logits = np.stack([1 - t, t], axis=-1) * 60.0
    loss, _ = L.sparse_cross_entropy(logits, t)
    assert 0 <= loss < 1e-20


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(2, 3, 3, 2))
    t = rng.integers(0, 2, (2, 3, 3))
    _, g = L.sparse_cross_entropy(z, t)
    num = _fd_linear(lambda v: np.array(L.sparse_cross_entropy(v, t)[0]), z.copy(), np.array(1.0))
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)
