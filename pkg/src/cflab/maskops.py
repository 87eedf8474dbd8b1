"""Binary mask morphology and the two mask-augmentation strategies.

Masks are H x W arrays over {0, 1} (uint8 or bool). Morphology uses a
square (2r+1) x (2r+1) structuring element, i.e. 8-connectivity, with the
region outside the canvas treated as background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, ShapeError


def _as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"mask must be H x W, got {m.shape}")
    if m.dtype != bool:
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ShapeError("mask values must lie in {0, 1}")
        m = m.astype(bool)
    return m


def _shift(m, d, axis, fill):
    out = np.full_like(m, fill)
    src = [slice(None), slice(None)]
    dst = [slice(None), slice(None)]
    if d > 0:
        src[axis] = slice(d, None)
        dst[axis] = slice(None, -d)
    else:
        src[axis] = slice(None, d)
        dst[axis] = slice(-d, None)
    out[tuple(dst)] = m[tuple(src)]
    return out


def _slide_or(m, r, axis):
    out = m.copy()
    for d in range(1, r + 1):
        out |= _shift(m, d, axis, False)
        out |= _shift(m, -d, axis, False)
    return out


def _slide_and(m, r, axis):
    # outside the canvas counts as background, so windows clipped by the
    # border fail the erosion test
    out = m.copy()
    for d in range(1, r + 1):
        out &= _shift(m, d, axis, False)
        out &= _shift(m, -d, axis, False)
    return out


def dilate(m, r: int) -> np.ndarray:
    """Minkowski dilation with a (2r+1)^2 square element; r=0 is identity."""
    if r < 0:
        raise ShapeError(f"radius must be >= 0, got {r}")
    m = _as_mask(m)
    out = _slide_or(_slide_or(m, r, 0), r, 1)
    return out.astype(np.uint8)


def erode(m, r: int) -> np.ndarray:
    """Minkowski erosion with a (2r+1)^2 square element; r=0 is identity."""
    if r < 0:
        raise ShapeError(f"radius must be >= 0, got {r}")
    m = _as_mask(m)
    out = _slide_and(_slide_and(m, r, 0), r, 1)
    return out.astype(np.uint8)


def to_bbox(m) -> np.ndarray:
    """Filled axis-aligned bounding rectangle of a non-empty mask."""
    m = _as_mask(m)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise EmptyMaskError("bounding box of an empty mask")
    out = np.zeros_like(m)
    out[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] = True
    return out.astype(np.uint8)


def _hull_vertices(points):
    """Monotone chain over (x, y) integer points; extreme points only."""
    pts = sorted({(int(x), int(y)) for x, y in points})
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def to_convex_hull(m) -> np.ndarray:
    """Filled discrete convex hull: pixels whose centers lie in the hull."""
    m = _as_mask(m)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        raise EmptyMaskError("convex hull of an empty mask")
    verts = _hull_vertices(zip(xs, ys))
    h, w = m.shape
    gy, gx = np.mgrid[0:h, 0:w]
    if len(verts) == 1:
        out = np.zeros_like(m)
        out[verts[0][1], verts[0][0]] = True
        return out.astype(np.uint8)
    if len(verts) == 2:
        (x0, y0), (x1, y1) = verts
        cross = (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0)
        t_num = (gx - x0) * (x1 - x0) + (gy - y0) * (y1 - y0)
        t_den = (x1 - x0) ** 2 + (y1 - y0) ** 2
        on = (cross == 0) & (t_num >= 0) & (t_num <= t_den)
        return on.astype(np.uint8)
    inside = np.ones((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        inside &= (x1 - x0) * (gy - y0) - (y1 - y0) * (gx - x0) >= 0
    return inside.astype(np.uint8)


@dataclass
class AugmentConfig:
    """Knobs for the two mask-augmentation strategies."""

    radius_range: tuple = (0, 2)  # dilation/erosion radius, inclusive
    jitter_amplitude: float = 0.15  # fraction of boundary-band pixels to flip
    shape_add: int = 1
    shape_remove: int = 1
    shape_size: tuple = (2.0, 4.0)  # disc radius / rect half-extent
    insertion_mode: str = "bbox"  # or "convex_hull"

    def __post_init__(self):
        if self.radius_range[0] < 0 or self.radius_range[1] < self.radius_range[0]:
            raise ShapeError(f"bad radius range {self.radius_range}")
        if not 0.0 <= self.jitter_amplitude <= 1.0:
            raise ShapeError(f"jitter amplitude must lie in [0, 1]")
        if self.insertion_mode not in ("bbox", "convex_hull"):
            raise ShapeError(f"insertion mode must be bbox or convex_hull")


def _random_blob(shape, rng, size_range):
    h, w = shape
    size = rng.uniform(*size_range)
    cy = rng.uniform(0, h - 1)
    cx = rng.uniform(0, w - 1)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if rng.random() < 0.5:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    return (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)


def perturb_boundary(m, cfg: AugmentConfig, rng) -> np.ndarray:
    """Flip a fraction of boundary-band pixels, then add/remove random blobs.

    The flip count is floor(amplitude * |band|) where the band is the
    one-pixel inner+outer boundary, so the Hamming distance to the input is
    bounded by amplitude * |band| plus the total area of the blobs.
    """
    m = _as_mask(m).copy()
    if cfg.jitter_amplitude > 0.0:
        band = dilate(m, 1).astype(bool) & ~erode(m, 1).astype(bool)
        ys, xs = np.nonzero(band)
        k = int(cfg.jitter_amplitude * ys.size)
        if k > 0:
            pick = rng.choice(ys.size, size=k, replace=False)
            m[ys[pick], xs[pick]] ^= True
    for _ in range(cfg.shape_add):
        m |= _random_blob(m.shape, rng, cfg.shape_size)
    for _ in range(cfg.shape_remove):
        m &= ~_random_blob(m.shape, rng, cfg.shape_size)
    return m.astype(np.uint8)


def augment_removal(m, cfg: AugmentConfig, rng) -> np.ndarray:
    """Removal-style noisy mask: (erode|dilate) -> boundary jitter -> blobs.

    Falls back to the input mask if augmentation empties it, since an empty
    conditioning mask would make the sample degenerate.
    """
    m = _as_mask(m)
    r = int(rng.integers(cfg.radius_range[0], cfg.radius_range[1] + 1))
    rough = erode(m, r) if rng.random() < 0.5 else dilate(m, r)
    if not rough.any():
        rough = m.astype(np.uint8)
    out = perturb_boundary(rough, cfg, rng)
    if not out.any():
        return m.astype(np.uint8).copy()
    return out


def augment_insertion(m, cfg: AugmentConfig) -> np.ndarray:
    """Insertion-style mask: expand to bounding box or convex hull."""
    if cfg.insertion_mode == "bbox":
        return to_bbox(m)
    return to_convex_hull(m)
