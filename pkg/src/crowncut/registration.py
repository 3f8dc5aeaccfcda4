"""Band-to-band homography estimation and composite-frame assembly.

Alignment runs an enhanced-correlation (ECC) Gauss-Newton solver on a full
8-parameter projective warp, coarse to fine over an image pyramid. Bands are
chained RED->GRE, GRE->REG, REG->NIR and every homography is composed into
the NIR frame before warping, so each band is resampled exactly once.

Convention: a :class:`Homography` maps *moving-band* pixel coordinates
``(x, y, 1)`` into the *fixed/reference* frame. Warping resamples by inverse
mapping, ``out(q) = band(H^-1 q)``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConstantBandWarning, DegenerateImage, DivergedEstimate, RegistrationError, ShapeMismatch
from .imaging import BAND_ORDER, BandId, MultispectralFrame, PSEUDO_RGB_ORDER, PseudoRgbImage, RasterGrid

#: Pairwise estimation order as (moving, fixed).
PAIR_ORDER = ((BandId.RED, BandId.GRE), (BandId.GRE, BandId.REG), (BandId.REG, BandId.NIR))
REFERENCE_BAND = BandId.NIR

_COORD_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class Homography:
    matrix: np.ndarray
    correlation: float | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("homography must be a finite 3x3 matrix")
        if abs(m[2, 2]) < 1e-300:
            raise ValueError("homography has h[2][2] == 0 and cannot be normalised")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map ``(N, 2)`` xy points."""
        p = np.asarray(points, dtype=np.float64)
        hom = np.c_[p, np.ones(len(p))] @ self.matrix.T
        return hom[:, :2] / hom[:, 2:3]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)))

    def tolist(self) -> list:
        return self.matrix.tolist()


@dataclass(frozen=True)
class RegistrationConfig:
    max_iters: int = 100
    eps: float = 1e-6
    pyramid_levels: int = 3
    correlation_floor: float = 0.5
    # Estimates moving every image corner by less than this many pixels are
    # treated as the identity. On co-registered synthetic bands the pairwise
    # estimates wander up to ~0.3 px at the corners (spectral contrast
    # differences), so smaller motion is indistinguishable from noise and
    # resampling it would only blur the bands.
    snap_tolerance: float = 0.5
    smooth: bool = True
    # coarse translation search radius = coarsest-level size // search_divisor
    search_divisor: int = 5
    # Gaussian scale of the local contrast normalisation applied at every
    # pyramid level; bands differ non-linearly in material contrast and ECC
    # only models a gain and offset. 0 disables.
    local_norm_sigma: float = 4.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


@dataclass(frozen=True, eq=False)
class AlignmentChain:
    """Per-band homographies into the reference frame plus the common crop."""

    homographies: Mapping[BandId, Homography]
    valid_extent: tuple[int, int, int, int]  # x, y, w, h in the reference frame
    reference: BandId = REFERENCE_BAND
    pairing: tuple = field(default=tuple((m.name, f.name) for m, f in PAIR_ORDER))

    def __post_init__(self):
        if not self.homographies[self.reference].is_identity():
            raise ValueError("reference band homography must be the identity")
        x, y, w, h = self.valid_extent
        if w < 1 or h < 1 or x < 0 or y < 0:
            raise ValueError(f"invalid extent {self.valid_extent}")

    def to_json(self) -> str:
        return json.dumps({
            "ref": self.reference.name,
            "pairing": [list(p) for p in self.pairing],
            "pair_roles": "moving_to_fixed",
            "homographies": {b.name: self.homographies[b].tolist() for b in BAND_ORDER},
            "correlations": {b.name: self.homographies[b].correlation for b in BAND_ORDER},
            "valid_extent": list(self.valid_extent),
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AlignmentChain":
        doc = json.loads(text)
        corr = doc.get("correlations", {})
        homs = {BandId.parse(k): Homography(np.array(v), corr.get(k)) for k, v in doc["homographies"].items()}
        return cls(
            homographies=homs,
            valid_extent=tuple(int(v) for v in doc["valid_extent"]),
            reference=BandId.parse(doc.get("ref", "NIR")),
            pairing=tuple(tuple(p) for p in doc.get("pairing", [])) or AlignmentChain.pairing,
        )


# -- resampling -------------------------------------------------------------


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample ``img`` at float coordinates; returns (values, inside-mask)."""
    h, w = img.shape
    rx, ry = np.round(xs), np.round(ys)
    xs = np.where(np.abs(xs - rx) < _COORD_SNAP, rx, xs)
    ys = np.where(np.abs(ys - ry) < _COORD_SNAP, ry, ys)
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    return top + fy * (bot - top), valid


def warp_band(band: RasterGrid, h: Homography, out_extent=None):
    """Resample ``band`` into the frame ``h`` maps it to.

    ``out_extent`` is ``(x, y, w, h)`` in the target frame and defaults to the
    band's own extent. Returns the warped raster and a boolean validity mask;
    pixels whose source falls outside the band are invalid and set to 0.
    """
    if out_extent is None:
        out_extent = (0, 0, band.width, band.height)
    x0, y0, w, hgt = (int(v) for v in out_extent)
    yy, xx = np.mgrid[y0:y0 + hgt, x0:x0 + w]
    src = h.inverse().matrix
    den = src[2, 0] * xx + src[2, 1] * yy + src[2, 2]
    sx = (src[0, 0] * xx + src[0, 1] * yy + src[0, 2]) / den
    sy = (src[1, 0] * xx + src[1, 1] * yy + src[1, 2]) / den
    vals, valid = _bilinear(band.values, sx, sy)
    vals = np.where(valid, vals, 0.0)
    return RasterGrid(np.maximum(vals, 0.0), max_value=band.max_value), valid


# -- estimation -------------------------------------------------------------


def _box3(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def _local_normalize(img: np.ndarray, sigma: float) -> np.ndarray:
    dev = img - ndimage.gaussian_filter(img, sigma, mode="nearest")
    var = ndimage.gaussian_filter(dev * dev, sigma, mode="nearest")
    return dev / np.sqrt(var + 1e-3 * var.mean() + 1e-300)


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    a = img[:h, :w]
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


# fine = _LEVEL_UP @ coarse for 2x2-average pyramids
_LEVEL_UP = np.array([[2.0, 0.0, 0.5], [0.0, 2.0, 0.5], [0.0, 0.0, 1.0]])
_LEVEL_DOWN = np.linalg.inv(_LEVEL_UP)


def _ecc_level(template: np.ndarray, image: np.ndarray, warp: np.ndarray, max_iters: int, eps: float):
    """Refine ``warp`` (template px -> image px) at one pyramid level.

    Returns the refined warp and the correlation it achieves.
    """
    hgt, wid = template.shape
    s = max(hgt, wid) / 2.0
    cx, cy = (wid - 1) / 2.0, (hgt - 1) / 2.0
    norm = np.array([[1 / s, 0, -cx / s], [0, 1 / s, -cy / s], [0, 0, 1.0]])
    denorm = np.linalg.inv(norm)
    b = norm @ warp @ denorm
    b /= b[2, 2]

    gy, gx = np.gradient(image)
    gx, gy = gx * s, gy * s
    yy, xx = np.mgrid[0:hgt, 0:wid]
    xn = (xx.ravel() - cx) / s
    yn = (yy.ravel() - cy) / s
    tmpl = template.ravel()
    stacked = np.stack([image, gx, gy])

    def correlate(b):
        den = b[2, 0] * xn + b[2, 1] * yn + 1.0
        un = (b[0, 0] * xn + b[0, 1] * yn + b[0, 2]) / den
        vn = (b[1, 0] * xn + b[1, 1] * yn + b[1, 2]) / den
        sampled, valid = _bilinear_stack(stacked, un * s + cx, vn * s + cy)
        if valid.sum() < 16:
            raise DivergedEstimate("warp left fewer than 16 overlapping pixels")
        t = tmpl[valid] - tmpl[valid].mean()
        w = sampled[0][valid]
        w = w - w.mean()
        tn, wn = np.linalg.norm(t), np.linalg.norm(w)
        if tn == 0 or wn == 0:
            raise DivergedEstimate("overlap region has zero variance")
        rho = float(t @ w / (tn * wn))
        return rho, (valid, t, w, wn, den, un, vn, sampled)

    rho_prev = None
    rho, state = correlate(b)
    for _ in range(max_iters):
        valid, t, w, wn, den, un, vn, sampled = state
        x, y, d = xn[valid], yn[valid], den[valid]
        u, v = un[valid], vn[valid]
        gxv, gyv = sampled[1][valid], sampled[2][valid]
        mix = gxv * u + gyv * v
        jac = np.stack([gxv * x, gxv * y, gxv, gyv * x, gyv * y, gyv, -mix * x, -mix * y], axis=1) / d[:, None]
        hess = jac.T @ jac
        try:
            hinv_pi = np.linalg.solve(hess, jac.T @ w)
        except np.linalg.LinAlgError:
            raise DivergedEstimate("singular ECC Hessian") from None
        lam_n = wn * wn - (jac.T @ w) @ hinv_pi
        lam_d = t @ w - (jac.T @ t) @ hinv_pi
        if lam_d <= 0:
            raise DivergedEstimate("correlation is being minimised; bands look uncorrelated")
        err = (lam_n / lam_d) * t - w
        dp = np.linalg.solve(hess, jac.T @ err)
        b = b.copy()
        b.flat[:8] += dp
        rho_prev = rho
        rho, state = correlate(b)
        if abs(rho - rho_prev) < eps:
            break
    out = denorm @ b @ norm
    return out / out[2, 2], rho


def _coarse_shift(template: np.ndarray, image: np.ndarray, radius: int) -> tuple[int, int]:
    """Integer (dx, dy) maximising NCC of ``image(x + d)`` against ``template(x)``."""
    hgt, wid = template.shape
    best, best_rho = (0, 0), -np.inf
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            t = template[max(0, -dy):hgt - max(0, dy), max(0, -dx):wid - max(0, dx)]
            i = image[max(0, dy):hgt + min(0, dy), max(0, dx):wid + min(0, dx)]
            t = t - t.mean()
            i = i - i.mean()
            den = np.sqrt((t * t).sum() * (i * i).sum())
            rho = (t * i).sum() / den if den > 0 else -np.inf
            if rho > best_rho:
                best, best_rho = (dx, dy), rho
    return best


def _bilinear_stack(stack: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    vals = []
    valid = None
    for img in stack:
        v, valid = _bilinear(img, xs, ys)
        vals.append(v)
    return vals, valid


def estimate_homography(moving: RasterGrid, fixed: RasterGrid, cfg: RegistrationConfig | None = None) -> Homography:
    """Find the homography taking ``moving`` onto ``fixed``.

    Returns a :class:`Homography` (moving -> fixed) whose ``correlation`` is the
    final zero-mean normalised correlation at full resolution.
    """
    cfg = cfg or RegistrationConfig()
    if moving.shape != fixed.shape:
        raise ShapeMismatch(f"images differ in shape: {moving.shape} vs {fixed.shape}")
    for name, img in (("moving", moving), ("fixed", fixed)):
        if np.ptp(img.values) == 0:
            raise DegenerateImage(f"{name} image has zero variance")

    def prep(a):
        a = (a - a.mean()) / a.std()
        return _box3(a) if cfg.smooth else a

    tmpl_pyr = [prep(fixed.values)]
    img_pyr = [prep(moving.values)]
    for _ in range(cfg.pyramid_levels - 1):
        if min(tmpl_pyr[-1].shape) < 64:
            break
        tmpl_pyr.append(_downsample(tmpl_pyr[-1]))
        img_pyr.append(_downsample(img_pyr[-1]))
    if cfg.local_norm_sigma > 0:
        tmpl_pyr = [_local_normalize(a, cfg.local_norm_sigma) for a in tmpl_pyr]
        img_pyr = [_local_normalize(a, cfg.local_norm_sigma) for a in img_pyr]

    # ECC only converges from a nearby start; seed the coarsest level with an
    # exhaustive integer-translation search.
    top = tmpl_pyr[-1]
    dx, dy = _coarse_shift(top, img_pyr[-1], max(2, min(top.shape) // cfg.search_divisor))
    warp = np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
    rho = -1.0
    for level in reversed(range(len(tmpl_pyr))):
        warp, rho = _ecc_level(tmpl_pyr[level], img_pyr[level], warp, cfg.max_iters, cfg.eps)
        if level:
            warp = _LEVEL_UP @ warp @ _LEVEL_DOWN
            warp /= warp[2, 2]
    if rho < cfg.correlation_floor:
        raise DivergedEstimate(f"final correlation {rho:.3f} below floor {cfg.correlation_floor}")

    h = Homography(np.linalg.inv(warp), correlation=rho)
    corners = np.array([[0, 0], [moving.width - 1, 0], [0, moving.height - 1], [moving.width - 1, moving.height - 1]], float)
    if np.max(np.linalg.norm(h.apply(corners) - corners, axis=1)) < cfg.snap_tolerance:
        h = Homography(np.eye(3), correlation=rho)
    return h


# -- frame assembly ---------------------------------------------------------


def _largest_rectangle(valid: np.ndarray) -> tuple[int, int, int, int]:
    """Largest axis-aligned all-True rectangle as (x, y, w, h); first found wins ties."""
    hgt, wid = valid.shape
    heights = np.zeros(wid, dtype=np.int64)
    best = (0, 0, 0, 0)
    best_area = 0
    for row in range(hgt):
        heights = np.where(valid[row], heights + 1, 0)
        stack: list[int] = []
        for col in range(wid + 1):
            cur = heights[col] if col < wid else 0
            start = col
            while stack and heights[stack[-1]] >= cur:
                top = stack.pop()
                hh = heights[top]
                left = stack[-1] + 1 if stack else 0
                area = hh * (col - left)
                if area > best_area:
                    best_area = area
                    best = (left, row - hh + 1, col - left, int(hh))
                start = left
            if col < wid:
                stack.append(col)
    return tuple(int(v) for v in best)


def apply_chain(raw: Mapping[BandId, RasterGrid], chain: AlignmentChain) -> MultispectralFrame:
    """Warp raw bands into the reference frame and crop to the chain's extent."""
    bands = {}
    for b in BAND_ORDER:
        h = chain.homographies[b]
        if h.is_identity():
            x, y, w, hh = chain.valid_extent
            src = raw[b]
            bands[b] = RasterGrid(src.values[y:y + hh, x:x + w], max_value=src.max_value)
        else:
            bands[b], _ = warp_band(raw[b], h, chain.valid_extent)
    return MultispectralFrame.from_aligned(bands)


def _check_raw(raw: Mapping[BandId, RasterGrid]):
    missing = [b.name for b in BAND_ORDER if b not in raw]
    if missing:
        raise ValueError(f"raw bands missing: {', '.join(missing)}")
    shapes = {raw[b].shape for b in BAND_ORDER}
    if len(shapes) != 1:
        raise ShapeMismatch(f"raw bands differ in shape: {sorted(shapes)}")


def estimate_chain(raw: Mapping[BandId, RasterGrid], cfg: RegistrationConfig | None = None) -> AlignmentChain:
    _check_raw(raw)
    cfg = cfg or RegistrationConfig()
    pairwise = {}
    for moving, fixed in PAIR_ORDER:
        try:
            pairwise[moving] = estimate_homography(raw[moving], raw[fixed], cfg)
        except RegistrationError as exc:
            pair = (moving.name, fixed.name)
            raise type(exc)(f"{pair[0]}->{pair[1]}: {exc}", pair=pair) from exc

    to_ref = {REFERENCE_BAND: Homography.identity()}
    to_ref[BandId.REG] = pairwise[BandId.REG]
    to_ref[BandId.GRE] = to_ref[BandId.REG] @ pairwise[BandId.GRE]
    to_ref[BandId.RED] = to_ref[BandId.GRE] @ pairwise[BandId.RED]
    for b in (BandId.REG, BandId.GRE, BandId.RED):
        to_ref[b] = Homography(to_ref[b].matrix, correlation=pairwise[b].correlation)

    hgt, wid = raw[REFERENCE_BAND].shape
    valid = np.ones((hgt, wid), dtype=bool)
    for b in BAND_ORDER:
        if not to_ref[b].is_identity():
            _, ok = warp_band(raw[b], to_ref[b])
            valid &= ok
    extent = (0, 0, wid, hgt) if valid.all() else _largest_rectangle(valid)
    if extent[2] < 1 or extent[3] < 1:
        raise DivergedEstimate("aligned bands share no common valid region")
    return AlignmentChain(homographies=to_ref, valid_extent=extent)


def align_frame(raw: Mapping[BandId, RasterGrid], cfg: RegistrationConfig | None = None):
    """Register four raw bands into the NIR frame and crop to the shared region.

    Returns ``(MultispectralFrame, AlignmentChain)``.
    """
    chain = estimate_chain(raw, cfg)
    return apply_chain(raw, chain), chain


def make_pseudo_rgb(frame: MultispectralFrame) -> PseudoRgbImage:
    """Stack GRE, RED, REG, each min-max rescaled to [0, 1]."""
    chans = []
    constant = []
    for b in PSEUDO_RGB_ORDER:
        v = frame[b].values
        lo, hi = v.min(), v.max()
        if hi == lo:
            constant.append(b)
            chans.append(np.zeros_like(v))
        else:
            chans.append((v - lo) / (hi - lo))
    if constant:
        warnings.warn(f"constant bands zeroed in pseudo-RGB: {[b.name for b in constant]}", ConstantBandWarning, stacklevel=2)
    return PseudoRgbImage(np.stack(chans, axis=-1), constant_bands=tuple(constant))


def reprojection_error(estimated: Homography, truth: Homography, shape, step: int = 8) -> float:
    """Mean distance between where ``estimated`` and ``truth`` send a pixel grid."""
    hgt, wid = shape
    yy, xx = np.mgrid[0:hgt:step, 0:wid:step]
    pts = np.c_[xx.ravel(), yy.ravel()].astype(float)
    return float(np.mean(np.linalg.norm(estimated.apply(pts) - truth.apply(pts), axis=1)))


class BandAligner(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` estimates the chain, ``transform`` applies it.

    ``X`` is a mapping ``BandId -> RasterGrid`` of raw, unregistered bands.
    """

    def __init__(self, max_iters=100, eps=1e-6, pyramid_levels=3, correlation_floor=0.5, snap_tolerance=0.5):
        self.max_iters = max_iters
        self.eps = eps
        self.pyramid_levels = pyramid_levels
        self.correlation_floor = correlation_floor
        self.snap_tolerance = snap_tolerance

    def _config(self) -> RegistrationConfig:
        return RegistrationConfig(
            max_iters=self.max_iters, eps=self.eps, pyramid_levels=self.pyramid_levels,
            correlation_floor=self.correlation_floor, snap_tolerance=self.snap_tolerance,
        )

    def fit(self, X, y=None):
        self.chain_ = estimate_chain(X, self._config())
        return self

    def transform(self, X):
        check_is_fitted(self, "chain_")
        _check_raw(X)
        return apply_chain(X, self.chain_)
