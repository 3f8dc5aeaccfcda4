"""Training-pair assembly: scenes -> ground-truth masks -> fixed-size tensors."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .groundtruth import GroundTruthParams, generate_groundtruth
from .imaging import BandId, PseudoRgbImage, RasterGrid, SegmentationMask
from .registration import RegistrationConfig
from .unet.train import Dataset

SETUPS = ("multispectral", "oneband")


def _grid(size_in: int, size_out: int) -> np.ndarray:
    # pixel-centre aligned sampling positions
    return (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5


def resample(arr: np.ndarray, size: int, order: int) -> np.ndarray:
    """Resample the two leading axes of ``arr`` to ``size`` x ``size``.

    ``order`` 1 is bilinear (images), 0 nearest neighbour (masks).
    """
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    yy, xx = np.meshgrid(_grid(h, size), _grid(w, size), indexing="ij")
    if order == 0:
        yi = np.clip(np.floor(yy + 0.5).astype(np.intp), 0, h - 1)
        xi = np.clip(np.floor(xx + 0.5).astype(np.intp), 0, w - 1)
        return arr[yi, xi]
    coords = np.array([np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)])
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr.astype(np.float64), coords, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(arr[..., i].astype(np.float64), coords, order=1, mode="nearest")
                     for i in range(arr.shape[2])], axis=-1)


def minmax(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)


def oneband_input(band: RasterGrid, size: int) -> np.ndarray:
    """``(1, size, size)`` network input from a single band."""
    return resample(minmax(band.values), size, 1)[None].astype(np.float32)


def multispectral_input(rgb: PseudoRgbImage, size: int) -> np.ndarray:
    """``(3, size, size)`` network input from the pseudo-RGB composite."""
    return resample(rgb.data, size, 1).transpose(2, 0, 1).astype(np.float32)


def mask_target(mask: SegmentationMask, size: int) -> np.ndarray:
    return resample(mask.labels, size, 0).astype(np.uint8)


@dataclass
class PairSet:
    """Both setups' inputs for the same scenes, sharing one mask per scene."""

    multispectral: np.ndarray   # (N, 3, S, S)
    oneband: np.ndarray         # (N, 1, S, S)
    masks: np.ndarray           # (N, S, S)
    names: list

    def dataset(self, setup: str) -> Dataset:
        if setup not in SETUPS:
            raise ValueError(f"setup must be one of {SETUPS}, got {setup!r}")
        return Dataset(getattr(self, setup), self.masks, list(self.names))

    def save(self, path) -> None:
        np.savez_compressed(path, multispectral=self.multispectral, oneband=self.oneband, masks=self.masks,
                            names=np.array(self.names))

    @classmethod
    def load(cls, path) -> "PairSet":
        with np.load(path) as z:
            return cls(z["multispectral"], z["oneband"], z["masks"], [str(n) for n in z["names"]])


def build_pairs(raw_scenes: Iterable[Mapping[BandId, RasterGrid]], size: int = 64,
                params: GroundTruthParams = GroundTruthParams(), cfg: RegistrationConfig | None = None,
                names: list | None = None) -> PairSet:
    """Label every scene with the classical pipeline and resample to ``size``.

    The one-band input is the aligned GRE channel so both setups share the
    same pixel grid and masks.
    """
    ms, ob, masks = [], [], []
    for raw in raw_scenes:
        gt = generate_groundtruth(raw, params, cfg)
        ms.append(multispectral_input(gt.pseudo_rgb, size))
        ob.append(oneband_input(gt.frame[BandId.GRE], size))
        masks.append(mask_target(gt.mask, size))
    names = names or [f"scene_{i:03d}" for i in range(len(masks))]
    return PairSet(np.stack(ms), np.stack(ob), np.stack(masks), list(names))


def load_groundtruth_dir(directory, size: int, setup: str = "multispectral") -> Dataset:
    """Read ``<scene>_rgb.pgm`` / ``<scene>_mask.pgm`` pairs written by the
    ``groundtruth`` command. The one-band setup uses the GRE channel of the
    composite."""
    from .exceptions import EmptyDataset
    from .raster_io import load_mask, load_rgb

    if setup not in SETUPS:
        raise ValueError(f"setup must be one of {SETUPS}, got {setup!r}")
    directory = Path(directory)
    images, masks, names = [], [], []
    for rgb_path in sorted(directory.rglob("*_rgb.pgm")):
        scene = rgb_path.name[:-len("_rgb.pgm")]
        mask_path = rgb_path.with_name(f"{scene}_mask.pgm")
        if not mask_path.exists():
            continue
        rgb = load_rgb(rgb_path)
        if setup == "multispectral":
            images.append(resample(rgb, size, 1).transpose(2, 0, 1))
        else:
            images.append(resample(rgb[..., 0], size, 1)[None])
        masks.append(mask_target(load_mask(mask_path), size))
        names.append(scene)
    if not images:
        raise EmptyDataset(f"no <scene>_rgb.pgm / <scene>_mask.pgm pairs under {directory}")
    return Dataset(np.stack(images).astype(np.float32), np.stack(masks), names)
