"""``.qunet`` files: the model envelope with int8/int32 blobs and QuantParams."""
from __future__ import annotations

from ..container import read_container, write_container
from ..exceptions import ConfigMismatch, InvalidConfig, MalformedModelFile, MissingCalibration
from ..unet.model import UNetConfig, layer_specs
from .model import QuantizedTensor, QuantizedUNet
from .scheme import QuantParams

KIND = "qunet"


def save_qmodel(qmodel: QuantizedUNet, path) -> int:
    """Write ``qmodel``; returns the blob payload size in bytes."""
    header = {
        "kind": KIND,
        "config": qmodel.config.to_dict(),
        "weight_params": {n: qt.params.to_dict() for n, qt in qmodel.weights.items()},
        "activation_params": {n: p.to_dict() for n, p in qmodel.activations.items()},
        "rounding": "half_away_from_zero",
    }
    tensors = []
    for name, qt in qmodel.weights.items():
        tensors += [(f"{name}.weight", qt.values), (f"{name}.bias", qmodel.biases[name])]
    return write_container(path, header, tensors)


def load_qmodel(path, expected_config: UNetConfig | None = None) -> QuantizedUNet:
    header, tensors = read_container(path)
    if header.get("kind") != KIND:
        raise MalformedModelFile(f"{path}: holds a {header.get('kind')!r} model, not {KIND!r}")
    try:
        cfg = UNetConfig.from_dict(header["config"])
        wparams = {k: QuantParams.from_dict(v) for k, v in header["weight_params"].items()}
        aparams = {k: QuantParams.from_dict(v) for k, v in header["activation_params"].items()}
    except (KeyError, TypeError, ValueError, InvalidConfig) as exc:
        raise MalformedModelFile(f"{path}: bad header ({exc})") from None
    if expected_config is not None and cfg != expected_config:
        raise ConfigMismatch(f"{path}: file config {cfg} differs from expected {expected_config}")
    names = [s[0] for s in layer_specs(cfg)]
    if list(tensors) != [f"{n}.{p}" for n in names for p in ("weight", "bias")] or set(wparams) != set(names):
        raise ConfigMismatch(f"{path}: tensor manifest does not match the stored config")
    weights = {n: QuantizedTensor(tensors[f"{n}.weight"], wparams[n]) for n in names}
    biases = {n: tensors[f"{n}.bias"] for n in names}
    try:
        return QuantizedUNet(cfg, weights, biases, aparams)
    except (MissingCalibration, TypeError, ValueError) as exc:
        raise MalformedModelFile(f"{path}: {exc}") from None
