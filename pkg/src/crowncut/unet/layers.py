"""Channels-last layer kernels with explicit backward passes.

Every activation is an ``(N, H, W, C)`` array. Valid (unpadded) convolutions
work on the batch flattened to ``(N*H*W, C)``: the tap at offset ``(dy, dx)``
is then a contiguous row slice shifted by ``dy*W + dx``, so each tap costs a
single dense GEMM. Rows that straddle an image edge produce garbage that is
discarded afterwards.

Weights use the ``(out, in, kh, kw)`` layout throughout.
"""
from __future__ import annotations

import numpy as np

# below this many im2col columns one wide GEMM beats per-tap GEMMs
_IM2COL_MAX_COLS = 96
# Rows per GEMM block are chosen so one block of input and output rows
# (about _BLOCK_ELEMS floats) stays cache resident.
_BLOCK_ELEMS = 49152


def _block_rows(c: int, k: int) -> int:
    return int(min(2048, max(256, _BLOCK_ELEMS // (c + k))))


def _tap_offsets(kh: int, kw: int, width: int) -> list[int]:
    return [dy * width + dx for dy in range(kh) for dx in range(kw)]


def conv_taps(weight: np.ndarray) -> np.ndarray:
    """``(K, C, kh, kw)`` weights to ``(kh*kw, C, K)`` tap matrices."""
    k, c, kh, kw = weight.shape
    return np.ascontiguousarray(weight.transpose(2, 3, 1, 0).reshape(kh * kw, c, k))


def _shifted_rows(xf: np.ndarray, offs: list[int], span: int) -> np.ndarray:
    return np.concatenate([xf[o:o + span] for o in offs], axis=1)


def conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Valid 2-D cross-correlation. Returns ``(y, cache)``."""
    n, h, w, c = x.shape
    k, c2, kh, kw = weight.shape
    if c != c2:
        raise ValueError(f"conv expects {c2} input channels, got {c}")
    x = np.ascontiguousarray(x)
    taps = conv_taps(weight).astype(x.dtype, copy=False)
    xf = x.reshape(-1, c)
    offs = _tap_offsets(kh, kw, w)
    span = xf.shape[0] - offs[-1]
    full = np.empty((xf.shape[0], k), dtype=x.dtype)
    cols = None
    blk = _block_rows(c, k)
    if len(offs) * c <= _IM2COL_MAX_COLS:
        cols = _shifted_rows(xf, offs, span)
        wmat = taps.reshape(-1, k)
        for s in range(0, span, blk):
            e = min(span, s + blk)
            np.matmul(cols[s:e], wmat, out=full[s:e])
    else:
        tmp = np.empty((blk, k), dtype=x.dtype)
        for s in range(0, span, blk):
            e = min(span, s + blk)
            acc, t_ = full[s:e], tmp[:e - s]
            np.matmul(xf[s:e], taps[0], out=acc)
            for t in range(1, len(offs)):
                np.matmul(xf[s + offs[t]:e + offs[t]], taps[t], out=t_)
                acc += t_
    y = full.reshape(n, h, w, k)[:, :h - kh + 1, :w - kw + 1] + bias.astype(x.dtype, copy=False)
    return y, (x, taps, (kh, kw), cols)


def conv_backward(dy: np.ndarray, cache, need_dx: bool = True, relu_out: np.ndarray | None = None):
    """Gradients ``(dx, dweight, dbias)``; ``dx`` is None unless requested.

    With ``relu_out`` the incoming gradient is first masked by that ReLU's
    output, i.e. ``dy`` is taken with respect to the activation.
    """
    x, taps, (kh, kw), cols = cache
    n, h, w, c = x.shape
    k = taps.shape[2]
    xf = x.reshape(-1, c)
    offs = _tap_offsets(kh, kw, w)
    span = xf.shape[0] - offs[-1]
    dfull = np.zeros((n, h, w, k), dtype=dy.dtype)
    inner = dfull[:, :h - kh + 1, :w - kw + 1]
    if relu_out is None:
        inner[...] = dy
    else:
        np.copyto(inner, dy, where=relu_out > 0)
    dbias = inner.sum(axis=(0, 1, 2))
    dfull = dfull.reshape(-1, k)[:span]

    if cols is not None:
        dtaps = (cols.T @ dfull).reshape(len(offs), c, k)
        dxf = None
        if need_dx:
            dcols = dfull @ taps.reshape(-1, k).T
            dxf = np.zeros_like(xf, dtype=dy.dtype)
            for t, o in enumerate(offs):
                dxf[o:o + span] += dcols[:, t * c:(t + 1) * c]
    else:
        dtaps = np.zeros((len(offs), c, k), dtype=dy.dtype)
        gtmp = np.empty((c, k), dtype=dy.dtype)
        dxf = np.zeros_like(xf, dtype=dy.dtype) if need_dx else None
        blk = _block_rows(c, k)
        xtmp = np.empty((blk, c), dtype=dy.dtype)
        tapsT = np.ascontiguousarray(taps.transpose(0, 2, 1))
        for s in range(0, span, blk):
            e = min(span, s + blk)
            d = dfull[s:e]
            for t, o in enumerate(offs):
                np.matmul(xf[s + o:e + o].T, d, out=gtmp)
                dtaps[t] += gtmp
                if need_dx:
                    xt = xtmp[:e - s]
                    np.matmul(d, tapsT[t], out=xt)
                    dxf[s + o:e + o] += xt
    dweight = dtaps.reshape(kh, kw, c, k).transpose(3, 2, 0, 1)
    if dxf is None:
        return None, dweight, dbias
    return dxf.reshape(n, h, w, c), dweight, dbias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, dtype=x.dtype)


def relu_backward(dy: np.ndarray, out: np.ndarray) -> np.ndarray:
    dy = np.array(dy, copy=True)
    dy[out <= 0] = 0
    return dy


_POOL_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool_forward(x: np.ndarray):
    """2x2 max pooling, stride 2. Spatial dims must be even."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max pooling needs even spatial dims, got {h}x{w}")
    y = np.maximum(np.maximum(x[:, 0::2, 0::2], x[:, 0::2, 1::2]), np.maximum(x[:, 1::2, 0::2], x[:, 1::2, 1::2]))
    return y, (x, y)


def maxpool_backward(dy: np.ndarray, cache) -> np.ndarray:
    """Route each gradient to the first maximal input of its window (row-major)."""
    x, y = cache
    dx = np.zeros(x.shape, dtype=dy.dtype)
    free = np.ones(y.shape, dtype=bool)
    for a, b in _POOL_ORDER:
        hit = free & (x[:, a::2, b::2] == y)
        np.copyto(dx[:, a::2, b::2], dy, where=hit)
        free &= ~hit
    return dx


def upconv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """2x2 transposed convolution with stride 2 (each input pixel -> 2x2 block)."""
    n, h, w, c = x.shape
    k = weight.shape[0]
    wmat = weight.transpose(1, 2, 3, 0).reshape(c, 4 * k).astype(x.dtype, copy=False)
    y = (x.reshape(-1, c) @ wmat).reshape(n, h, w, 2, 2, k)
    y = y.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, k) + bias.astype(x.dtype, copy=False)
    return y, (x, wmat)


def upconv_backward(dy: np.ndarray, cache):
    x, wmat = cache
    n, h, w, c = x.shape
    k = wmat.shape[1] // 4
    dcat = dy.reshape(n, h, 2, w, 2, k).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * k)
    dweight = (x.reshape(-1, c).T @ dcat).reshape(c, 2, 2, k).transpose(3, 0, 1, 2)
    dx = (dcat @ wmat.T).reshape(n, h, w, c)
    return dx, dweight, dy.sum(axis=(0, 1, 2))


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    off = (x.shape[1] - size) // 2
    return x[:, off:off + size, off:off + size]


def crop_concat_forward(skip: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Centre-crop ``skip`` to ``up`` and stack channels as ``[skip, up]``."""
    if (skip.shape[1] - up.shape[1]) % 2:
        raise ValueError("skip and upsampled maps differ by an odd number of pixels")
    return np.concatenate([center_crop(skip, up.shape[1]), up], axis=-1)


def crop_concat_backward(dy: np.ndarray, skip_shape, skip_channels: int):
    dskip = np.zeros(skip_shape, dtype=dy.dtype)
    size = dy.shape[1]
    off = (skip_shape[1] - size) // 2
    dskip[:, off:off + size, off:off + size] = dy[..., :skip_channels]
    return dskip, dy[..., skip_channels:]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sparse_cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Mean ``-log softmax(logits)[target]`` over pixels and its logit gradient.

    ``logits`` is ``(..., classes)``, ``target`` holds integer class ids.
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    tgt = np.asarray(target, dtype=np.intp)[..., None]
    count = tgt.size
    loss = -np.take_along_axis(logp, tgt, axis=-1).sum() / count
    grad = np.exp(logp)
    np.put_along_axis(grad, tgt, np.take_along_axis(grad, tgt, axis=-1) - 1, axis=-1)
    return float(loss), grad / count
