"""Raster containers, band semantics and red-normalisation."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from .exceptions import ShapeMismatch


class BandId(enum.Enum):
    """Multispectral camera bands with nominal centre wavelength in nm."""

    GRE = 550
    RED = 660
    REG = 735
    NIR = 790

    @property
    def wavelength_nm(self) -> int:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "BandId":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown band {name!r}; expected one of GRE, RED, REG, NIR") from None


BAND_ORDER = (BandId.GRE, BandId.RED, BandId.REG, BandId.NIR)
PSEUDO_RGB_ORDER = (BandId.GRE, BandId.RED, BandId.REG)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """Single-band intensity image.

    ``values`` is a read-only ``(height, width)`` float64 array. ``max_value``
    is the top of the source dynamic range (255 for 8-bit sources, 65535 for
    16-bit ones) and is what relative thresholds such as ``red_floor`` refer to.
    """

    values: np.ndarray
    max_value: float = 65535.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeMismatch(f"raster must be a non-empty 2-D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("raster intensities must be finite and non-negative")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return self.max_value == other.max_value and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class SegmentationMask:
    """Per-pixel labels, 0 = not a tree, 1 = tree."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.size == 0:
            raise ShapeMismatch(f"mask must be a non-empty 2-D array, got shape {lab.shape}")
        if not np.all((lab == 0) | (lab == 1)):
            raise ValueError("mask labels must be 0 or 1")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, SegmentationMask):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class MultispectralFrame:
    """Four co-registered bands sharing one extent.

    Build one through :func:`crowncut.registration.align_frame`, the synthetic
    generator, or :meth:`from_aligned` when the caller vouches that the bands
    are already registered.
    """

    bands: Mapping[BandId, RasterGrid]

    def __post_init__(self):
        missing = [b.name for b in BAND_ORDER if b not in self.bands]
        if missing:
            raise ValueError(f"frame is missing bands: {', '.join(missing)}")
        shapes = {self.bands[b].shape for b in BAND_ORDER}
        if len(shapes) != 1:
            raise ShapeMismatch(f"bands differ in shape: {sorted(shapes)}")
        object.__setattr__(self, "bands", {b: self.bands[b] for b in BAND_ORDER})

    @classmethod
    def from_aligned(cls, bands: Mapping[BandId, RasterGrid]) -> "MultispectralFrame":
        return cls(bands=dict(bands))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands[BandId.NIR].shape

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    def __getitem__(self, band: BandId) -> RasterGrid:
        return self.bands[band]

    def stack(self) -> np.ndarray:
        """Return the bands as an ``(H, W, 4)`` array in GRE, RED, REG, NIR order."""
        return np.stack([self.bands[b].values for b in BAND_ORDER], axis=-1)


@dataclass(frozen=True, eq=False)
class PseudoRgbImage:
    """GRE, RED, REG channels rescaled to [0, 1]; ``data`` is ``(H, W, 3)``.

    ``constant_bands`` lists bands that had zero range and were zeroed.
    """

    data: np.ndarray
    constant_bands: tuple[BandId, ...] = field(default=())

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64, copy=True)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ShapeMismatch(f"pseudo-RGB must be (H, W, 3), got {d.shape}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def channel(self, band: BandId) -> np.ndarray:
        return self.data[..., PSEUDO_RGB_ORDER.index(band)]


class NormalizedField(NamedTuple):
    vectors: np.ndarray      # (H, W, 4); NaN where unreliable
    unreliable: np.ndarray   # (H, W) bool


def red_normalize(frame: MultispectralFrame, red_floor: float = 0.01) -> NormalizedField:
    """Divide every pixel's band vector by its RED component.

    Pixels whose RED intensity is below ``red_floor`` times the RED band's
    dynamic-range maximum are flagged unreliable and carry NaN vectors.
    """
    if not 0.0 < red_floor < 1.0:
        raise ValueError(f"red_floor must lie in (0, 1), got {red_floor}")
    stack = frame.stack()
    red_band = frame[BandId.RED]
    red = stack[..., 1]
    unreliable = red < red_floor * red_band.max_value
    safe = np.where(unreliable, 1.0, red)
    vectors = stack / safe[..., None]
    vectors[..., 1] = 1.0
    vectors[unreliable] = np.nan
    return NormalizedField(vectors, unreliable)
