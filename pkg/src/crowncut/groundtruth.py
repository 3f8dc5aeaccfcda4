"""Classical tree-mask generation from a four-band frame.

The pipeline is: align bands, build the composite, measure each pixel's
distance to a reference spectrum in red-normalised space, take a disc minimum
(a region containing any near-reference pixel is likely canopy), smooth with a
disc median, threshold into tree/background/unknown markers and resolve the
unknowns with a marker-controlled watershed over the distance map.

Score maps are plain float64 ``(H, W)`` arrays with values in [0, 1]; low
means close to the reference spectrum.
"""
from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np
from sklearn.base import BaseEstimator

from .imaging import BandId, MultispectralFrame, PseudoRgbImage, RasterGrid, SegmentationMask, red_normalize
from .registration import AlignmentChain, RegistrationConfig, align_frame, make_pseudo_rgb

DEFAULT_RP = (1.29, 1.00, 3.13, 2.76)


class Marker(enum.IntEnum):
    UNKNOWN = 0
    TREE = 1
    BACKGROUND = 2


@dataclass(frozen=True)
class ReferencePoint:
    """Target spectrum in red-normalised (GRE, RED, REG, NIR) coordinates."""

    rp: tuple[float, float, float, float] = DEFAULT_RP

    def __post_init__(self):
        rp = tuple(float(v) for v in self.rp)
        if len(rp) != 4:
            raise ValueError("reference point needs four components")
        if rp[1] != 1.0:
            raise ValueError("reference point must be RED-normalised (second component 1)")
        if min(rp) <= 0:
            raise ValueError("reference point components must be positive")
        object.__setattr__(self, "rp", rp)

    @classmethod
    def parse(cls, text: str) -> "ReferencePoint":
        return cls(tuple(float(v) for v in text.split(",")))

    def as_array(self) -> np.ndarray:
        return np.array(self.rp)


@dataclass(frozen=True)
class GroundTruthParams:
    rp: ReferencePoint = ReferencePoint()
    r_min: int = 5
    k: int = 5
    theta_m: float = 0.15
    theta_bg: float = 0.5
    red_floor: float = 0.01
    # map flooded by the watershed: "distance" (the normalised distance map)
    # or "median" (the min+median filtered map the markers come from). The
    # min filter dilates every low region by r_min, so flooding the filtered
    # map inflates crowns; the raw distance keeps boundaries on spectral edges.
    elevation: str = "distance"

    def __post_init__(self):
        if self.elevation not in ("distance", "median"):
            raise ValueError(f"elevation must be 'distance' or 'median', got {self.elevation!r}")
        if not 0 < self.theta_m < self.theta_bg <= 1:
            raise ValueError("thresholds must satisfy 0 < theta_m < theta_bg <= 1")
        if self.r_min < 1 or self.k < 1:
            raise ValueError("filter radii must be >= 1")


def distance_map(frame: MultispectralFrame, rp: ReferencePoint = ReferencePoint(), red_floor: float = 0.01) -> np.ndarray:
    """Euclidean distance to ``rp`` per pixel, divided by the map maximum.

    Unreliable (near-zero RED) pixels take the largest reliable distance. An
    all-equal map normalises to zeros.
    """
    field = red_normalize(frame, red_floor)
    d = np.sqrt(np.sum((field.vectors - rp.as_array()) ** 2, axis=-1))
    reliable = ~field.unreliable
    top = float(d[reliable].max()) if reliable.any() else 0.0
    d[field.unreliable] = top
    if top <= 0 or np.all(d == d.flat[0]):
        return np.zeros_like(d)
    return d / top


def disc_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def _shifted(padded: np.ndarray, r: int, dy: int, dx: int, shape) -> np.ndarray:
    h, w = shape
    return padded[r + dy:r + dy + h, r + dx:r + dx + w]


def min_filter_disc(score: np.ndarray, radius: int) -> np.ndarray:
    """Minimum over a disc of ``radius`` clipped to the image."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    score = np.asarray(score, dtype=np.float64)
    r = int(radius)
    padded = np.pad(score, r, mode="constant", constant_values=np.inf)
    out = np.full(score.shape, np.inf)
    for dy, dx in disc_offsets(r):
        np.minimum(out, _shifted(padded, r, dy, dx, score.shape), out=out)
    return out


def median_filter_disc(score: np.ndarray, k: int) -> np.ndarray:
    """Median over a disc of radius ``k`` clipped to the image (lower median)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    score = np.asarray(score, dtype=np.float64)
    r = int(k)
    padded = np.pad(score, r, mode="constant", constant_values=np.nan)
    stack = np.stack([_shifted(padded, r, dy, dx, score.shape) for dy, dx in disc_offsets(r)])
    count = np.sum(~np.isnan(stack), axis=0)
    stack.sort(axis=0)  # NaN sorts last
    idx = ((count - 1) // 2)[None]
    return np.take_along_axis(stack, idx, axis=0)[0]


def threshold_markers(score: np.ndarray, theta_m: float = 0.15, theta_bg: float = 0.5) -> np.ndarray:
    """TREE below ``theta_m``, BACKGROUND above ``theta_bg``, UNKNOWN between."""
    if not 0 < theta_m < theta_bg <= 1:
        raise ValueError("thresholds must satisfy 0 < theta_m < theta_bg <= 1")
    score = np.asarray(score)
    markers = np.full(score.shape, Marker.UNKNOWN, dtype=np.uint8)
    markers[score < theta_m] = Marker.TREE
    markers[score > theta_bg] = Marker.BACKGROUND
    return markers


def watershed_segment(score: np.ndarray, markers: np.ndarray) -> SegmentationMask:
    """Marker-controlled priority flooding over ``score`` as elevation.

    All markers flood at once. A pixel is claimed by the first basin whose
    flood reaches it; the flood level of a pixel is the larger of its own
    elevation and the level it was reached from, ties pop in FIFO order.
    4-connectivity.
    """
    score = np.asarray(score, dtype=np.float64)
    markers = np.asarray(markers)
    if score.shape != markers.shape:
        raise ValueError(f"score {score.shape} and markers {markers.shape} differ in shape")
    h, w = score.shape
    if not np.any(markers == Marker.TREE):
        return SegmentationMask(np.zeros((h, w), dtype=np.uint8))

    labels = markers.astype(np.uint8).ravel().copy()
    elev = score.ravel().tolist()
    heap: list = []
    counter = 0
    for idx in np.flatnonzero(labels != Marker.UNKNOWN).tolist():
        heap.append((elev[idx], counter, idx))
        counter += 1
    heapq.heapify(heap)
    lab = labels.tolist()
    unknown = int(Marker.UNKNOWN)
    while heap:
        level, _, idx = heapq.heappop(heap)
        y, x = divmod(idx, w)
        here = lab[idx]
        for n, ok in ((idx - w, y > 0), (idx + w, y < h - 1), (idx - 1, x > 0), (idx + 1, x < w - 1)):
            if ok and lab[n] == unknown:
                lab[n] = here
                e = elev[n]
                heapq.heappush(heap, (e if e > level else level, counter, n))
                counter += 1
    out = np.asarray(lab, dtype=np.uint8).reshape(h, w)
    return SegmentationMask((out == Marker.TREE).astype(np.uint8))


class ScoreStages(NamedTuple):
    distance: np.ndarray
    minimum: np.ndarray
    median: np.ndarray
    markers: np.ndarray


def score_stages(frame: MultispectralFrame, params: GroundTruthParams = GroundTruthParams()) -> ScoreStages:
    dist = distance_map(frame, params.rp, params.red_floor)
    mins = min_filter_disc(dist, params.r_min)
    med = median_filter_disc(mins, params.k)
    return ScoreStages(dist, mins, med, threshold_markers(med, params.theta_m, params.theta_bg))


def segment_frame(frame: MultispectralFrame, params: GroundTruthParams = GroundTruthParams()) -> SegmentationMask:
    stages = score_stages(frame, params)
    elevation = stages.distance if params.elevation == "distance" else stages.median
    return watershed_segment(elevation, stages.markers)


class GroundTruth(NamedTuple):
    mask: SegmentationMask
    frame: MultispectralFrame
    pseudo_rgb: PseudoRgbImage
    chain: AlignmentChain | None


def generate_groundtruth(raw_bands: Mapping[BandId, RasterGrid], params: GroundTruthParams = GroundTruthParams(),
                         cfg: RegistrationConfig | None = None, align: bool = True) -> GroundTruth:
    """Run the full mask-generation sequence on four raw bands.

    With ``align=False`` the bands are taken as already co-registered.
    """
    if align:
        frame, chain = align_frame(raw_bands, cfg)
    else:
        frame, chain = MultispectralFrame.from_aligned(raw_bands), None
    rgb = make_pseudo_rgb(frame)
    return GroundTruth(segment_frame(frame, params), frame, rgb, chain)


class GroundTruthSegmenter(BaseEstimator):
    """Stateless estimator front-end; ``predict`` maps raw band dicts to masks."""

    def __init__(self, rp=DEFAULT_RP, r_min=5, k=5, theta_m=0.15, theta_bg=0.5, red_floor=0.01, elevation="distance",
                 align=True):
        self.rp = rp
        self.r_min = r_min
        self.k = k
        self.theta_m = theta_m
        self.theta_bg = theta_bg
        self.red_floor = red_floor
        self.elevation = elevation
        self.align = align

    def _params(self) -> GroundTruthParams:
        return GroundTruthParams(ReferencePoint(tuple(self.rp)), self.r_min, self.k, self.theta_m, self.theta_bg,
                                 self.red_floor, self.elevation)

    def fit(self, X=None, y=None):
        self.params_ = self._params()
        return self

    def predict(self, X):
        """``X`` is one raw-band mapping or a list of them."""
        params = self._params()
        single = isinstance(X, Mapping)
        items = [X] if single else list(X)
        masks = [generate_groundtruth(raw, params, align=self.align).mask for raw in items]
        return masks[0] if single else masks
