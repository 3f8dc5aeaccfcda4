"""U-Net definition, forward pass and reverse-mode gradients.

Convolutions are unpadded. To still label every input pixel the whole input is
mirror-padded once (overlap-tile), so after all border losses the logits line
up 1:1 with the original pixels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from ..exceptions import InvalidConfig, ShapeMismatch
from ..imaging import SegmentationMask
from . import layers as L


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    num_classes: int = 2
    depth: int = 4
    base_channels: int = 64
    input_size: int = 256
    padding_mode: str = "mirror"

    def __post_init__(self):
        if self.in_channels < 1:
            raise InvalidConfig("in_channels must be >= 1")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.depth < 1:
            raise InvalidConfig("depth must be >= 1")
        if self.base_channels < 1:
            raise InvalidConfig("base_channels must be >= 1")
        if self.input_size < 1 or self.input_size % (2 ** self.depth):
            raise InvalidConfig(f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}")
        if self.padding_mode != "mirror":
            raise InvalidConfig(f"unsupported padding_mode {self.padding_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


class Geometry(NamedTuple):
    padded_size: int   # network input side after mirror padding
    output_size: int   # raw logit side (>= input_size)
    pad: int           # mirror pad per side
    crop: int          # logit rows/cols dropped per side


def unet_geometry(depth: int, size: int) -> Geometry:
    """Padding that makes an unpadded U-Net label a ``size`` x ``size`` image.

    Picks the smallest raw output side ``o >= size`` (same parity) for which
    every pooled map has even side; the input side then follows exactly.
    """
    out = size
    while True:
        s, ok = out, True
        for _ in range(depth):
            s += 4
            if s % 2:
                ok = False
                break
            s //= 2
        if ok:
            break
        out += 2
    inp = s + 4
    for _ in range(depth):
        inp = 2 * inp + 4
    return Geometry(inp, out, (inp - size) // 2, (out - size) // 2)


def layer_specs(cfg: UNetConfig) -> list[tuple[str, str, int, int]]:
    """Ordered ``(name, kind, in_ch, out_ch)``; kinds: conv3, up2, conv1."""
    specs = []
    c_in = cfg.in_channels
    for lvl in range(cfg.depth):
        c = cfg.channels(lvl)
        specs += [(f"enc{lvl}.conv1", "conv3", c_in, c), (f"enc{lvl}.conv2", "conv3", c, c)]
        c_in = c
    c = cfg.channels(cfg.depth)
    specs += [("bottom.conv1", "conv3", c_in, c), ("bottom.conv2", "conv3", c, c)]
    for lvl in reversed(range(cfg.depth)):
        c_out = cfg.channels(lvl)
        specs += [(f"dec{lvl}.up", "up2", c, c_out),
                  (f"dec{lvl}.conv1", "conv3", 2 * c_out, c_out),
                  (f"dec{lvl}.conv2", "conv3", c_out, c_out)]
        c = c_out
    specs.append(("head", "conv1", c, cfg.num_classes))
    return specs


_KERNEL = {"conv3": 3, "up2": 2, "conv1": 1}


class UNetModel:
    """Configuration plus an ordered mapping ``name -> (weight, bias)``."""

    def __init__(self, config: UNetConfig, params: dict, seed: int | None = None):
        self.config = config
        self.seed = seed
        expected = layer_specs(config)
        if [s[0] for s in expected] != list(params):
            raise InvalidConfig("parameter names do not match the configuration")
        for name, kind, cin, cout in expected:
            w, b = params[name]
            k = _KERNEL[kind]
            if w.shape != (cout, cin, k, k) or b.shape != (cout,):
                raise ShapeMismatch(f"{name}: weight {w.shape} / bias {b.shape} do not match {(cout, cin, k, k)}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"{name}: non-finite parameters")
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values()))[0].dtype

    @cached_property
    def geometry(self) -> Geometry:
        return unet_geometry(self.config.depth, self.config.input_size)

    def layer_names(self) -> list[str]:
        return list(self.params)

    def conv_layer_count(self) -> int:
        return len(self.params)

    def astype(self, dtype) -> "UNetModel":
        return UNetModel(self.config, {k: (w.astype(dtype), b.astype(dtype)) for k, (w, b) in self.params.items()},
                         self.seed)

    def copy(self) -> "UNetModel":
        return self.astype(self.dtype)

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in self.params.values())

    def __repr__(self):
        return f"UNetModel({self.config}, params={self.parameter_count()})"


def build_model(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """He-uniform weights, bounds ``+-sqrt(6 / fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, kind, cin, cout in layer_specs(config):
        k = _KERNEL[kind]
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        params[name] = (w, np.zeros(cout, dtype=dtype))
    return UNetModel(config, params, seed)


def _as_nhwc(model: UNetModel, x: np.ndarray):
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ShapeMismatch(f"expected input (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}) "
                            f"or its unbatched form, got {x.shape}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=model.dtype), single


def mirror_pad(x: np.ndarray, pad: int) -> np.ndarray:
    """Reflect-pad the spatial axes of an NHWC batch (edge pixel not repeated)."""
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")


def activation_names(cfg: UNetConfig) -> list[str]:
    """Every tensor the forward pass produces, in execution order."""
    names = ["input"]
    for lvl in range(cfg.depth):
        names += [f"enc{lvl}.conv1", f"enc{lvl}.conv2", f"enc{lvl}.pool"]
    names += ["bottom.conv1", "bottom.conv2"]
    for lvl in reversed(range(cfg.depth)):
        names += [f"dec{lvl}.up", f"dec{lvl}.concat", f"dec{lvl}.conv1", f"dec{lvl}.conv2"]
    names.append("head")
    return names


def forward_nhwc(model: UNetModel, x: np.ndarray, keep_cache: bool = True, observe=None):
    """Run the network on an unpadded NHWC batch; returns ``(logits_nhwc, cache)``.

    ``observe(name, tensor)`` is called for every tensor listed by
    :func:`activation_names`; ``head`` is reported before the final crop.
    """
    geo = model.geometry
    p = model.params
    cfg = model.config
    seen = observe if observe is not None else (lambda name, t: None)
    h = mirror_pad(x, geo.pad)
    seen("input", h)
    cache: list = []
    skips = []

    def conv_relu(name, h):
        y, c = L.conv_forward(h, *p[name])
        out = L.relu_forward(y)
        if keep_cache:
            cache.append((name, c, out))
        seen(name, out)
        return out

    for lvl in range(cfg.depth):
        h = conv_relu(f"enc{lvl}.conv1", h)
        h = conv_relu(f"enc{lvl}.conv2", h)
        skips.append(h)
        h, pc = L.maxpool_forward(h)
        if keep_cache:
            cache.append((f"enc{lvl}.pool", pc, None))
        seen(f"enc{lvl}.pool", h)
    h = conv_relu("bottom.conv1", h)
    h = conv_relu("bottom.conv2", h)
    for lvl in reversed(range(cfg.depth)):
        h, uc = L.upconv_forward(h, *p[f"dec{lvl}.up"])
        if keep_cache:
            cache.append((f"dec{lvl}.up", uc, None))
        seen(f"dec{lvl}.up", h)
        skip = skips[lvl]
        h = L.crop_concat_forward(skip, h)
        if keep_cache:
            cache.append((f"dec{lvl}.concat", (skip.shape, skip.shape[-1]), None))
        seen(f"dec{lvl}.concat", h)
        h = conv_relu(f"dec{lvl}.conv1", h)
        h = conv_relu(f"dec{lvl}.conv2", h)
    logits, hc = L.conv_forward(h, *p["head"])
    if keep_cache:
        cache.append(("head", hc, None))
    seen("head", logits)
    return L.center_crop(logits, cfg.input_size), cache


def backward_nhwc(model: UNetModel, dlogits: np.ndarray, cache: list) -> dict:
    """Reverse accumulation through a cached forward; returns ``name -> (dW, db)``."""
    geo = model.geometry
    n, s, _, k = dlogits.shape
    full = np.zeros((n, geo.output_size, geo.output_size, k), dtype=dlogits.dtype)
    full[:, geo.crop:geo.crop + s, geo.crop:geo.crop + s] = dlogits
    grads = {}
    dskip: dict = {}
    d = full
    first = model.layer_names()[0]
    for name, c, out in reversed(cache):
        if name.endswith(".pool"):
            lvl = int(name[3:name.index(".")])
            d = L.maxpool_backward(d, c) + dskip.pop(lvl)
        elif name.endswith(".concat"):
            lvl = int(name[3:name.index(".")])
            dskip[lvl], d = L.crop_concat_backward(d, *c)
        elif name.endswith(".up"):
            d, dw, db = L.upconv_backward(d, c)
            grads[name] = (dw, db)
        else:
            d, dw, db = L.conv_backward(d, c, need_dx=name != first, relu_out=out)
            grads[name] = (dw, db)
    return {name: grads[name] for name in model.layer_names()}


def forward(model: UNetModel, x: np.ndarray) -> np.ndarray:
    """Logits ``(classes, H, W)`` for a ``(C, H, W)`` input, or batched ``(N, ...)``."""
    xh, single = _as_nhwc(model, x)
    logits, _ = forward_nhwc(model, xh, keep_cache=False)
    out = logits.transpose(0, 3, 1, 2)
    return out[0] if single else out


def predict_proba(model: UNetModel, x: np.ndarray) -> np.ndarray:
    return L.softmax(forward(model, x), axis=-3)


def _targets(model: UNetModel, masks, n: int) -> np.ndarray:
    t = np.asarray([m.labels if isinstance(m, SegmentationMask) else m for m in masks]) \
        if isinstance(masks, (list, tuple)) else np.asarray(masks)
    if t.ndim == 2:
        t = t[None]
    s = model.config.input_size
    if t.shape != (n, s, s):
        raise ShapeMismatch(f"targets must be ({n}, {s}, {s}), got {t.shape}")
    if t.min() < 0 or t.max() >= model.config.num_classes:
        raise ValueError("target labels out of class range")
    return t


def loss_and_gradients(model: UNetModel, images: np.ndarray, masks):
    """Mean sparse categorical cross-entropy over all pixels and its gradients."""
    xh, _ = _as_nhwc(model, images)
    if xh.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    t = _targets(model, masks, xh.shape[0])
    logits, cache = forward_nhwc(model, xh)
    loss, dlogits = L.sparse_cross_entropy(logits, t)
    return loss, backward_nhwc(model, dlogits.astype(model.dtype, copy=False), cache)


def argmax_mask(logits: np.ndarray) -> SegmentationMask:
    """Class-1 mask from ``(2, H, W)`` logits; ties go to class 0."""
    return SegmentationMask((np.argmax(logits, axis=0) == 1).astype(np.uint8))


def predict_mask(model: UNetModel, x: np.ndarray):
    logits = forward(model, x)
    if logits.ndim == 3:
        return argmax_mask(logits)
    return [argmax_mask(lg) for lg in logits]
