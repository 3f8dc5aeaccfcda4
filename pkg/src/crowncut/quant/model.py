"""Post-training quantization of a trained U-Net and its integer forward pass.

Weights are per-tensor symmetric int8, activations asymmetric int8 over
calibrated ranges, biases int32 at ``w_scale * in_scale``. Between layers the
int32 accumulators are rescaled by a fixed-point multiplier; max pooling acts
on the int8 codes directly. The head writes uint8 logits, which are
dequantized once at the very end.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from ..exceptions import EmptyCalibrationSet, MissingCalibration, ShapeMismatch
from ..unet.model import UNetConfig, UNetModel, activation_names, forward_nhwc, layer_specs, unet_geometry
from ..unet.train import Dataset, pixel_accuracy
from .scheme import INT8, Multiplier, QuantParams, quantize, quantize_bias, quantize_weights

_ROW_BLOCK = 4096
_IM2COL_MAX_COLS = 96


# -- calibration ------------------------------------------------------------


@dataclass
class Calibration:
    """Running ``[min, max]`` per activation tensor over ``count`` images."""

    ranges: dict = field(default_factory=dict)
    count: int = 0

    def update(self, name: str, tensor: np.ndarray) -> None:
        lo, hi = float(tensor.min()), float(tensor.max())
        if name in self.ranges:
            plo, phi = self.ranges[name]
            lo, hi = min(lo, plo), max(hi, phi)
        self.ranges[name] = (lo, hi)

    def widened(self) -> dict:
        return {k: (min(lo, 0.0), max(hi, 0.0)) for k, (lo, hi) in self.ranges.items()}


def calibrate(model: UNetModel, calib_images, n: int | None = None, batch_size: int = 4) -> Calibration:
    """Float forward over the first ``n`` images recording per-tensor ranges.

    Returned ranges (see :meth:`Calibration.widened`) always contain 0.
    """
    images = np.asarray(calib_images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    if n is not None:
        if n < 1:
            raise EmptyCalibrationSet("calibration needs n >= 1 images")
        images = images[:n]
    if images.shape[0] == 0:
        raise EmptyCalibrationSet("no calibration images supplied")
    cfg = model.config
    if images.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ShapeMismatch(f"calibration images {images.shape[1:]} do not match the model input")
    cal = Calibration()
    for s in range(0, images.shape[0], batch_size):
        x = np.ascontiguousarray(images[s:s + batch_size].transpose(0, 2, 3, 1), dtype=model.dtype)
        forward_nhwc(model, x, keep_cache=False, observe=cal.update)
    cal.count = images.shape[0]
    return cal


# -- quantized model --------------------------------------------------------


class QuantizedTensor(NamedTuple):
    values: np.ndarray      # int8
    params: QuantParams

    @property
    def shape(self):
        return self.values.shape


def layer_inputs(cfg: UNetConfig) -> dict:
    """Activation tensor feeding each parameterised layer."""
    src = {}
    prev = "input"
    for lvl in range(cfg.depth):
        src[f"enc{lvl}.conv1"] = prev
        src[f"enc{lvl}.conv2"] = f"enc{lvl}.conv1"
        prev = f"enc{lvl}.pool"
    src["bottom.conv1"] = prev
    src["bottom.conv2"] = "bottom.conv1"
    prev = "bottom.conv2"
    for lvl in reversed(range(cfg.depth)):
        src[f"dec{lvl}.up"] = prev
        src[f"dec{lvl}.conv1"] = f"dec{lvl}.concat"
        src[f"dec{lvl}.conv2"] = f"dec{lvl}.conv1"
        prev = f"dec{lvl}.conv2"
    src["head"] = prev
    return src


@dataclass(frozen=True, eq=False)
class QuantizedUNet:
    config: UNetConfig
    weights: dict        # layer -> QuantizedTensor (zero_point 0)
    biases: dict         # layer -> int32 array
    activations: dict    # tensor -> QuantParams

    def __post_init__(self):
        missing = [n for n in activation_names(self.config) if n not in self.activations]
        if missing:
            raise MissingCalibration(f"no quantization parameters for: {', '.join(missing)}")
        names = [s[0] for s in layer_specs(self.config)]
        if list(self.weights) != names or list(self.biases) != names:
            raise ShapeMismatch("quantized layers do not match the configuration")
        for name, qt in self.weights.items():
            if qt.params.zero_point != 0:
                raise ValueError(f"{name}: weight zero point must be 0")
            if qt.values.dtype != np.int8 or self.biases[name].dtype != np.int32:
                raise TypeError(f"{name}: weights must be int8 and biases int32")

    @cached_property
    def geometry(self):
        return unet_geometry(self.config.depth, self.config.input_size)

    @cached_property
    def multipliers(self) -> dict:
        """Fixed-point rescale factors, one per layer plus one per concat input."""
        out = {}
        src = layer_inputs(self.config)
        for name, qt in self.weights.items():
            m = self.activations[src[name]].scale * qt.params.scale / self.activations[name].scale
            out[name] = Multiplier.from_real(m)
        for lvl in range(self.config.depth):
            cat = self.activations[f"dec{lvl}.concat"].scale
            out[f"dec{lvl}.skip>cat"] = Multiplier.from_real(self.activations[f"enc{lvl}.conv2"].scale / cat)
            out[f"dec{lvl}.up>cat"] = Multiplier.from_real(self.activations[f"dec{lvl}.up"].scale / cat)
        return out

    @cached_property
    def _int_weights(self) -> dict:
        # int32 copies in GEMM layout: conv (taps, C, K); up-conv (C, 4K)
        out = {}
        for name, qt in self.weights.items():
            w = qt.values.astype(np.int32)
            k, c, kh, kw = w.shape
            if name.endswith(".up"):
                out[name] = np.ascontiguousarray(w.transpose(1, 2, 3, 0).reshape(c, 4 * k))
            else:
                out[name] = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(kh * kw, c, k))
        return out

    def payload_bytes(self) -> int:
        """int8 weights + int32 biases + 8 bytes (scale, zero point) per quantized tensor."""
        data = sum(q.values.nbytes for q in self.weights.values()) + sum(b.nbytes for b in self.biases.values())
        return data + 8 * (len(self.weights) + len(self.activations))


def float_payload_bytes(model: UNetModel) -> int:
    return 4 * model.parameter_count()


def quantize_model(model: UNetModel, calibration: Calibration) -> QuantizedUNet:
    ranges = calibration.widened()
    cfg = model.config
    missing = [n for n in activation_names(cfg) if n not in ranges]
    if missing:
        raise MissingCalibration(f"calibration does not cover: {', '.join(missing)}")
    acts = {}
    for name in activation_names(cfg):
        acts[name] = QuantParams.from_range(*ranges[name], dtype="uint8" if name == "head" else "int8")
    for lvl in range(cfg.depth):
        # pooling selects existing codes, so it keeps its input's parameters
        acts[f"enc{lvl}.pool"] = acts[f"enc{lvl}.conv2"]
    src = layer_inputs(cfg)
    weights, biases = {}, {}
    for name, (w, b) in model.params.items():
        qw, wp = quantize_weights(w)
        weights[name] = QuantizedTensor(qw, wp)
        biases[name] = quantize_bias(b, wp.scale * acts[src[name]].scale)
    return QuantizedUNet(cfg, weights, biases, acts)


# -- integer kernels --------------------------------------------------------


def _run_blocks(fn, span: int, threads: int) -> None:
    blocks = [(s, min(span, s + _ROW_BLOCK)) for s in range(0, span, _ROW_BLOCK)]
    if threads <= 1 or len(blocks) == 1:
        for s, e in blocks:
            fn(s, e)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda se: fn(*se), blocks))


def _int_conv(q: np.ndarray, zp_in: int, taps: np.ndarray, bias: np.ndarray, kh: int, kw: int,
              threads: int) -> np.ndarray:
    """int32 accumulators of a valid conv over zero-point-corrected codes."""
    n, h, w, c = q.shape
    k = taps.shape[2]
    xf = (q.astype(np.int32) - np.int32(zp_in)).reshape(-1, c)
    offs = [dy * w + dx for dy in range(kh) for dx in range(kw)]
    span = xf.shape[0] - offs[-1]
    acc = np.zeros((xf.shape[0], k), dtype=np.int32)
    wide = len(offs) * c <= _IM2COL_MAX_COLS
    wmat = taps.reshape(-1, k)

    def rows(s, e):
        if wide:
            cols = np.concatenate([xf[s + o:e + o] for o in offs], axis=1)
            acc[s:e] = np.einsum("tc,ck->tk", cols, wmat)
        else:
            out = acc[s:e]
            for t, o in enumerate(offs):
                out += np.einsum("tc,ck->tk", xf[s + o:e + o], taps[t])

    _run_blocks(rows, span, threads)
    return acc.reshape(n, h, w, k)[:, :h - kh + 1, :w - kw + 1].astype(np.int64) + bias


def _requant(acc, mult: Multiplier, params: QuantParams, relu: bool) -> np.ndarray:
    lo, hi = params.qrange
    if relu:
        lo = max(lo, params.zero_point)
    return (np.clip(mult.apply(acc) + params.zero_point, lo, hi)).astype(params.np_dtype)


def _int_pool(q: np.ndarray) -> np.ndarray:
    return np.maximum(np.maximum(q[:, 0::2, 0::2], q[:, 0::2, 1::2]), np.maximum(q[:, 1::2, 0::2], q[:, 1::2, 1::2]))


def _rescale(q: np.ndarray, src: QuantParams, mult: Multiplier, dst: QuantParams) -> np.ndarray:
    return _requant(q.astype(np.int64) - src.zero_point, mult, dst, relu=False)


class IntForward(NamedTuple):
    logits: np.ndarray          # dequantized, (N, classes, H, W)
    codes: np.ndarray           # uint8 head codes, (N, H, W, classes)
    intermediates: dict         # tensor name -> int8 codes (only when requested)


def int_forward_full(qmodel: QuantizedUNet, x, threads: int = 1, keep: bool = False) -> IntForward:
    """Integer-only pass over a batch. ``x`` is float ``(N, C, S, S)`` in the
    input tensor's range, or its int8 codes."""
    cfg = qmodel.config
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ShapeMismatch(f"expected input (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
    act = qmodel.activations
    q = x if x.dtype == np.int8 else quantize(x, act["input"])
    geo = qmodel.geometry
    q = np.pad(q.transpose(0, 2, 3, 1), ((0, 0), (geo.pad, geo.pad), (geo.pad, geo.pad), (0, 0)), mode="reflect")
    inter = {}
    mult = qmodel.multipliers
    wts = qmodel._int_weights
    src = layer_inputs(cfg)

    def note(name, t):
        if keep:
            inter[name] = t
        return t

    def conv(name, h, relu=True):
        k = qmodel.weights[name].shape[2]
        acc = _int_conv(h, act[src[name]].zero_point, wts[name], qmodel.biases[name], k, k, threads)
        return note(name, _requant(acc, mult[name], act[name], relu))

    h = note("input", q)
    skips = []
    for lvl in range(cfg.depth):
        h = conv(f"enc{lvl}.conv1", h)
        h = conv(f"enc{lvl}.conv2", h)
        skips.append(h)
        h = note(f"enc{lvl}.pool", _int_pool(h))
    h = conv("bottom.conv1", h)
    h = conv("bottom.conv2", h)
    for lvl in reversed(range(cfg.depth)):
        name = f"dec{lvl}.up"
        n, hh, ww, c = h.shape
        wmat = wts[name]
        kout = wmat.shape[1] // 4
        xs = (h.astype(np.int32) - np.int32(act[src[name]].zero_point)).reshape(-1, c)
        acc = np.einsum("tc,ck->tk", xs, wmat).reshape(n, hh, ww, 2, 2, kout)
        acc = acc.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * hh, 2 * ww, kout).astype(np.int64) + qmodel.biases[name]
        up = note(name, _requant(acc, mult[name], act[name], relu=False))
        skip = skips[lvl]
        off = (skip.shape[1] - up.shape[1]) // 2
        skip = skip[:, off:off + up.shape[1], off:off + up.shape[2]]
        cat = act[f"dec{lvl}.concat"]
        h = note(f"dec{lvl}.concat", np.concatenate(
            [_rescale(skip, act[f"enc{lvl}.conv2"], mult[f"dec{lvl}.skip>cat"], cat),
             _rescale(up, act[name], mult[f"dec{lvl}.up>cat"], cat)], axis=-1))
        h = conv(f"dec{lvl}.conv1", h)
        h = conv(f"dec{lvl}.conv2", h)
    codes = conv("head", h, relu=False)
    c = geo.crop
    codes = codes[:, c:c + cfg.input_size, c:c + cfg.input_size]
    hp = act["head"]
    logits = ((codes.astype(np.float64) - hp.zero_point) * hp.scale).transpose(0, 3, 1, 2)
    return IntForward(logits, codes, inter)


def int_forward(qmodel: QuantizedUNet, x, threads: int = 1) -> np.ndarray:
    """Dequantized logits; ``(classes, H, W)`` for one image or ``(N, ...)``."""
    single = np.ndim(x) == 3
    out = int_forward_full(qmodel, x, threads).logits
    return out[0] if single else out


def int_predict(qmodel: QuantizedUNet, x, threads: int = 1, batch_size: int = 4) -> np.ndarray:
    """Class-1 masks ``(N, H, W)`` from the integer path; ties go to class 0."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    out = []
    for s in range(0, x.shape[0], batch_size):
        codes = int_forward_full(qmodel, x[s:s + batch_size], threads).codes
        out.append((codes[..., 1] > codes[..., 0]).astype(np.uint8))
    return np.concatenate(out)


class Comparison(NamedTuple):
    float_acc: float
    quant_acc: float
    delta: float
    size_ratio: float

    def as_dict(self) -> dict:
        return self._asdict()


def compare_models(model: UNetModel, qmodel: QuantizedUNet, eval_set: Dataset, threads: int = 1) -> Comparison:
    """Pixel accuracy of both paths on ``eval_set`` and the payload size ratio.

    ``delta`` is ``quant_acc - float_acc``.
    """
    if model.config != qmodel.config:
        raise ShapeMismatch("float and quantized models have different configs")
    if len(eval_set) == 0:
        raise ValueError("eval_set is empty")
    facc = pixel_accuracy(model, eval_set)
    pred = int_predict(qmodel, eval_set.images, threads)
    qacc = float(np.mean(pred == eval_set.masks))
    return Comparison(facc, qacc, qacc - facc, qmodel.payload_bytes() / float_payload_bytes(model))
