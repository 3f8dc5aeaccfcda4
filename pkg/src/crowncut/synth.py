"""Deterministic synthetic multispectral orchard scenes.

A scene is rendered once in the reference (NIR) frame on a padded canvas:
textured soil, optional grass patches and a gravel road, then soft-edged tree
discs whose spectra sit on the reference point in red-normalised space. Each
non-reference band is then resampled through its own small rigid
misalignment, and sensor noise is added last.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import PlacementFailure
from .imaging import BAND_ORDER, BandId, RasterGrid, SegmentationMask
from .raster_io import save_mask, save_raster
from .registration import Homography, warp_band

FULL_SCALE = 65535.0
DEFAULT_RP = (1.29, 1.00, 3.13, 2.76)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 256
    height: int = 256
    tree_count: int = 5
    radius_range: tuple[float, float] = (24.0, 34.0)
    min_gap: float = 12.0
    # signatures are fractions of full scale in GRE, RED, REG, NIR order
    tree_signature: tuple[float, ...] = tuple(0.28 * c for c in DEFAULT_RP)
    tree_sigma: float = 0.01
    tree_brightness: tuple[float, float] = (0.92, 1.08)
    background_signature: tuple[float, ...] = (0.26, 0.24, 0.30, 0.32)
    background_sigma: float = 0.01
    texture_amplitude: float = 0.10
    fine_texture_amplitude: float = 0.15
    canopy_texture_amplitude: float = 0.15
    grass_signature: tuple[float, ...] | None = (0.36, 0.30, 0.48, 0.51)
    grass_fraction: float = 0.06
    road_signature: tuple[float, ...] | None = (0.55, 0.55, 0.58, 0.62)
    road_width: float = 14.0
    max_translation: float = 8.0
    max_rotation_deg: float = 2.0
    noise_sigma: float = 0.02
    edge_fraction: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 1 <= lo <= hi:
            raise ValueError("radius_range must satisfy 1 <= min <= max")
        if self.tree_count < 0:
            raise ValueError("tree_count must be >= 0")
        for name in ("tree_signature", "background_signature", "grass_signature", "road_signature"):
            sig = getattr(self, name)
            if sig is not None and (len(sig) != 4 or min(sig) <= 0):
                raise ValueError(f"{name} must be four positive values")


@dataclass(eq=False)
class Scene:
    raw: dict                       # BandId -> RasterGrid, misaligned
    true_mask: SegmentationMask     # in the reference frame
    true_homographies: dict         # BandId -> Homography, band -> reference
    aligned: dict                   # BandId -> RasterGrid, before misalignment (noisy)
    trees: list = field(default_factory=list)   # (cx, cy, r)
    spec: SceneSpec = field(default_factory=SceneSpec)


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _place_trees(spec: SceneSpec, rng, road_dist):
    trees = []
    lo, hi = spec.radius_range
    attempts = 0
    while len(trees) < spec.tree_count:
        attempts += 1
        if attempts > 5000:
            raise PlacementFailure(f"could not place {spec.tree_count} trees without overlap")
        r = rng.uniform(lo, hi)
        cx = rng.uniform(r + 2, spec.width - r - 3)
        cy = rng.uniform(r + 2, spec.height - r - 3)
        if cx >= spec.width - r - 3 or cy >= spec.height - r - 3:
            continue
        if road_dist is not None and road_dist(cx, cy) < r + spec.road_width / 2 + spec.min_gap:
            continue
        if all(math.hypot(cx - x, cy - y) >= r + q + spec.min_gap for x, y, q in trees):
            trees.append((cx, cy, r))
    return trees


def _misalignment(spec: SceneSpec, rng) -> dict:
    c = np.array([(spec.width - 1) / 2.0, (spec.height - 1) / 2.0])
    homs = {BandId.NIR: Homography.identity()}
    for b in (BandId.GRE, BandId.RED, BandId.REG):
        th = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
        t = rng.uniform(-spec.max_translation, spec.max_translation, size=2)
        rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        m = np.eye(3)
        m[:2, :2] = rot
        m[:2, 2] = c - rot @ c + t
        homs[b] = Homography(m)
    return homs


def generate_scene(spec: SceneSpec | None = None) -> Scene:
    """Render one scene; the same ``spec`` always yields a bit-identical scene."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(spec.rng_seed)
    diag = math.hypot(spec.width, spec.height) / 2.0
    margin = int(math.ceil(spec.max_translation * math.sqrt(2) + diag * math.radians(spec.max_rotation_deg))) + 4
    ch, cw = spec.height + 2 * margin, spec.width + 2 * margin
    yy, xx = np.mgrid[0:ch, 0:cw].astype(np.float64) - margin  # reference-frame coordinates

    # multiplicative illumination/soil texture shared by all bands: keeps
    # ratios intact and gives the registration linearly related structure
    texture = (1.0 + spec.texture_amplitude * np.clip(_smooth_field(rng, (ch, cw), 10.0), -2.5, 2.5) / 2.5
               + spec.fine_texture_amplitude * np.clip(_smooth_field(rng, (ch, cw), 1.5), -2.5, 2.5) / 2.5)
    canopy = 1.0 + spec.canopy_texture_amplitude * np.clip(_smooth_field(rng, (ch, cw), 2.0), -2.5, 2.5) / 2.5
    bg = np.array(spec.background_signature) * (1 + spec.background_sigma * rng.standard_normal(4))
    canvas = texture[..., None] * bg

    grass_field = _smooth_field(rng, (ch, cw), 6.0)
    if spec.grass_signature is not None and spec.grass_fraction > 0:
        thr = np.quantile(grass_field, 1.0 - spec.grass_fraction)
        g = np.clip((grass_field - thr) / 0.3, 0.0, 1.0)[..., None]
        canvas = (1 - g) * canvas + g * texture[..., None] * np.array(spec.grass_signature)

    road_dist = None
    angle = rng.uniform(0, math.pi)
    offset = rng.uniform(-0.35, 0.35) * min(spec.width, spec.height)
    if spec.road_signature is not None:
        nx, ny = math.cos(angle), math.sin(angle)
        cx0, cy0 = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0

        def road_dist(x, y):
            return np.abs((x - cx0) * nx + (y - cy0) * ny - offset)

        a = np.clip(spec.road_width / 2 + 0.5 - road_dist(xx, yy), 0.0, 1.0)[..., None]
        canvas = (1 - a) * canvas + a * np.array(spec.road_signature)

    trees = _place_trees(spec, rng, road_dist)
    mask = np.zeros((ch, cw), dtype=bool)
    for cx, cy, r in trees:
        sig = np.array(spec.tree_signature) * rng.uniform(*spec.tree_brightness)
        sig = sig * (1 + spec.tree_sigma * rng.standard_normal(4))
        d = np.hypot(xx - cx, yy - cy)
        alpha = np.clip((r - d) / (spec.edge_fraction * r), 0.0, 1.0)[..., None]
        canvas = (1 - alpha) * canvas + alpha * sig * canopy[..., None]
        mask |= d <= r

    homs = _misalignment(spec, rng)
    shift = np.array([[1.0, 0, margin], [0, 1.0, margin], [0, 0, 1.0]])
    inner = (slice(margin, margin + spec.height), slice(margin, margin + spec.width))
    raw, aligned = {}, {}
    for i, b in enumerate(BAND_ORDER):
        plane = RasterGrid(canvas[..., i] * FULL_SCALE)
        # raw_b(x) = canvas_b(H_b x + margin); warp_band samples at h^-1 q
        to_canvas = Homography(shift) @ homs[b]
        warped, valid = warp_band(plane, to_canvas.inverse(), (0, 0, spec.width, spec.height))
        assert valid.all()
        noise = spec.noise_sigma * FULL_SCALE * rng.standard_normal((spec.height, spec.width))
        raw[b] = RasterGrid(np.clip(np.round(warped.values + noise), 0, FULL_SCALE))
        clean = plane.values[inner]
        aligned[b] = RasterGrid(np.clip(np.round(clean + noise), 0, FULL_SCALE))

    true_trees = [(cx, cy, r) for cx, cy, r in trees]
    return Scene(raw=raw, true_mask=SegmentationMask(mask[inner].astype(np.uint8)),
                 true_homographies=homs, aligned=aligned, trees=true_trees, spec=spec)


def scene_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def generate_dataset(spec_template: SceneSpec | None = None, count: int = 85, seed: int = 0,
                     out_dir=None, prefix: str = "scene", fmt: str = "pgm") -> list[Scene]:
    """Generate ``count`` scenes with seeds spawned from ``seed``.

    When ``out_dir`` is given each scene is written to its own sub-directory
    in the layout the ``groundtruth`` command reads.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    spec_template = spec_template or SceneSpec()
    scenes = []
    for i, s in enumerate(scene_seeds(seed, count)):
        scene = generate_scene(replace(spec_template, rng_seed=s))
        if out_dir is not None:
            write_scene(scene, Path(out_dir) / f"{prefix}_{i:03d}", f"{prefix}_{i:03d}", fmt=fmt)
        scenes.append(scene)
    return scenes


def write_scene(scene: Scene, directory, name: str, fmt: str = "pgm") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "tif" if fmt == "tif" else "pgm"
    for b in BAND_ORDER:
        save_raster(scene.raw[b], directory / f"{name}_{b.name}.{ext}", fmt=ext)
    save_mask(scene.true_mask, directory / f"{name}_truth.pgm")
    doc = {
        "homographies": {b.name: scene.true_homographies[b].tolist() for b in BAND_ORDER},
        "homography_direction": "band_to_reference",
        "reference": "NIR",
        "trees": [list(t) for t in scene.trees],
        "spec": asdict(scene.spec),
    }
    (directory / f"{name}_truth.json").write_text(json.dumps(doc, indent=2))
