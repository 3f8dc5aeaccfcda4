"""``.unet`` model files: JSON header plus float32 weight blobs."""
from __future__ import annotations

import numpy as np

from ..container import read_container, write_container
from ..exceptions import ConfigMismatch, InvalidConfig, MalformedModelFile, ShapeMismatch
from .model import UNetConfig, UNetModel, layer_specs

KIND = "unet"
ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


def model_tensors(model: UNetModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, (w, b) in model.params.items():
        out += [(f"{name}.weight", w.astype(np.float32)), (f"{name}.bias", b.astype(np.float32))]
    return out


def save_model(model: UNetModel, path, extra: dict | None = None) -> int:
    """Write ``model``; returns the weight payload size in bytes."""
    header = {
        "kind": KIND,
        "config": model.config.to_dict(),
        "init": {"scheme": "he_uniform", "seed": model.seed},
        "optimizer": {"name": "adam", **ADAM_DEFAULTS},
    }
    if extra:
        header["extra"] = extra
    return write_container(path, header, model_tensors(model))


def load_model(path, expected_config: UNetConfig | None = None) -> UNetModel:
    header, tensors = read_container(path)
    if header.get("kind") != KIND:
        raise MalformedModelFile(f"{path}: holds a {header.get('kind')!r} model, not {KIND!r}")
    try:
        cfg = UNetConfig.from_dict(header["config"])
    except (KeyError, TypeError, InvalidConfig) as exc:
        raise MalformedModelFile(f"{path}: bad config ({exc})") from None
    if expected_config is not None and cfg != expected_config:
        raise ConfigMismatch(f"{path}: file config {cfg} differs from expected {expected_config}")
    names = [s[0] for s in layer_specs(cfg)]
    wanted = [f"{n}.{part}" for n in names for part in ("weight", "bias")]
    if list(tensors) != wanted:
        raise ConfigMismatch(f"{path}: tensor manifest does not match the stored config")
    params = {n: (tensors[f"{n}.weight"], tensors[f"{n}.bias"]) for n in names}
    try:
        return UNetModel(cfg, params, header.get("init", {}).get("seed"))
    except ShapeMismatch as exc:
        raise ConfigMismatch(f"{path}: {exc}") from None
