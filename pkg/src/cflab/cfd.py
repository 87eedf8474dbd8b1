"""Context-aware feature-deviation score for object removal results.

The score is reference-free: it segments the result image, classifies
segments against the edit mask into nested (fully inside) and overlapping
(crossing the boundary) sets, pairs each nested segment with the union of
its adjacent overlapping segments, and penalizes feature deviation between
the two. A context term compares the filled region against its bounding-box
surroundings. Lower is better; both terms lie in [0, 2] for unit-norm
embeddings, and the total is exactly their sum.

Backends are pluggable: a segmenter maps an image to binary masks and an
embedder maps (image, pixel set) to a unit-norm feature vector. The
built-ins are deterministic stand-ins for heavyweight vision models.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ppm
from .errors import EmptyMaskError, MetricError, ShapeError
from .maskops import dilate, to_bbox

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class ColorComponentSegmenter:
    """Connected components of the color-quantized image.

    Colors are quantized to ``levels`` per channel; 4-connected components
    of constant quantized color with at least ``min_area`` pixels become
    segments. Deterministic and cheap, which is what the metric needs from
    a segmentation backend at this scale.
    """

    def __init__(self, levels=8, min_area=9):
        self.levels = levels
        self.min_area = min_area

    def segment(self, image) -> list[np.ndarray]:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"segmenter expects H x W x 3, got {image.shape}")
        q = np.clip((image * self.levels).astype(np.int64), 0, self.levels - 1)
        codes = (q[..., 0] * self.levels + q[..., 1]) * self.levels + q[..., 2]
        masks = []
        for code in np.unique(codes):
            labels, n = ndimage.label(codes == code, structure=_FOUR_CONN)
            for i in range(1, n + 1):
                comp = labels == i
                if comp.sum() >= self.min_area:
                    masks.append(comp.astype(np.uint8))
        return masks


class PrecomputedSegmenter:
    """Serves segment masks stored as one PGM file per mask in a directory."""

    def __init__(self, mask_dir):
        self.mask_dir = Path(mask_dir)

    def segment(self, image) -> list[np.ndarray]:
        masks = []
        for path in sorted(self.mask_dir.glob("*.pgm")):
            m = ppm.read_mask(path)
            if m.any():
                masks.append(m)
        return masks


class HistogramEmbedder:
    """Color histogram (4 levels/channel = 64 bins) plus an 8-bin
    gradient-orientation histogram weighted by gradient magnitude,
    L2-normalized. Captures flat-color vs textured vs alien-object
    contrast without any learned model."""

    color_levels = 4
    orient_bins = 8

    def embed(self, image, region) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        region = np.asarray(region).astype(bool)
        if region.shape != image.shape[:2]:
            raise ShapeError(f"region {region.shape} vs image {image.shape}")
        if not region.any():
            raise EmptyMaskError("cannot embed an empty region")
        lv = self.color_levels
        q = np.clip((image * lv).astype(np.int64), 0, lv - 1)
        codes = ((q[..., 0] * lv + q[..., 1]) * lv + q[..., 2])[region]
        color_hist = np.bincount(codes, minlength=lv**3).astype(np.float64)

        gray = image.mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gy, gx)[region]
        orient = np.mod(np.arctan2(gy, gx)[region], np.pi)
        bins = np.clip(
            (orient / np.pi * self.orient_bins).astype(np.int64), 0, self.orient_bins - 1
        )
        orient_hist = np.bincount(bins, weights=mag, minlength=self.orient_bins)

        feat = np.concatenate([color_hist, orient_hist])
        return feat / np.linalg.norm(feat)


class MomentEmbedder:
    """Low-dimensional alternative backend: per-channel mean/std plus
    gradient-magnitude statistics and a constant component, L2-normalized."""

    def embed(self, image, region) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        region = np.asarray(region).astype(bool)
        if not region.any():
            raise EmptyMaskError("cannot embed an empty region")
        px = image[region]
        gray = image.mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gy, gx)[region]
        feat = np.concatenate(
            [px.mean(axis=0), px.std(axis=0), [mag.mean(), mag.std(), 1.0]]
        )
        return feat / np.linalg.norm(feat)


# ---------------------------------------------------------------------------
# Mask taxonomy
# ---------------------------------------------------------------------------


@dataclass
class MaskTaxonomy:
    """Segments classified against the edit mask, plus the mask itself."""

    edit_mask: np.ndarray
    nested: list = field(default_factory=list)
    overlapping: list = field(default_factory=list)
    ignored: list = field(default_factory=list)


def classify_masks(segments, edit_mask) -> MaskTaxonomy:
    """Assign each segment to nested / overlapping / ignored w.r.t. the mask."""
    edit = np.asarray(edit_mask).astype(bool)
    if not edit.any():
        raise EmptyMaskError("edit mask is empty")
    tax = MaskTaxonomy(edit_mask=edit.astype(np.uint8))
    for seg in segments:
        s = np.asarray(seg).astype(bool)
        if s.shape != edit.shape:
            raise ShapeError(f"segment {s.shape} vs mask {edit.shape}")
        inter = s & edit
        if not inter.any():
            tax.ignored.append(s.astype(np.uint8))
        elif (s & ~edit).any():
            tax.overlapping.append(s.astype(np.uint8))
        else:
            tax.nested.append(s.astype(np.uint8))
    return tax


def adjacent(a, b) -> bool:
    """True iff the masks touch: one-pixel square dilation of either overlaps."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if not a.any() or not b.any():
        return False
    return bool((dilate(a, 1).astype(bool) & b).any())


def _context_ring(edit_mask):
    """Bounding-box surroundings of the mask, expanding by 8 px if empty."""
    edit = np.asarray(edit_mask).astype(bool)
    box = to_bbox(edit).astype(bool)
    ring = box & ~edit
    if not ring.any():
        ring = dilate(box, 8).astype(bool) & ~edit
    if not ring.any():
        raise MetricError("mask fills the image; no surrounding context exists")
    return ring


def pair_merge(taxonomy: MaskTaxonomy) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pair each nested mask with the union of its adjacent overlapping masks.

    Nested masks with no adjacent overlapping mask fall back to the
    bounding-box surroundings of the edit mask, so every nested mask
    contributes to the penalty.
    """
    pairs = []
    for nested in taxonomy.nested:
        neighbor = np.zeros_like(nested, dtype=bool)
        hit = False
        for over in taxonomy.overlapping:
            if adjacent(nested, over):
                neighbor |= over.astype(bool)
                hit = True
        if not hit:
            neighbor = _context_ring(taxonomy.edit_mask)
        pairs.append((nested, neighbor.astype(np.uint8)))
    return pairs


# ---------------------------------------------------------------------------
# Score terms
# ---------------------------------------------------------------------------


@dataclass
class CfdReport:
    """Score decomposition plus per-pair diagnostics."""

    d_context: float
    d_hallucination: float
    cfd: float
    pairs: list = field(default_factory=list)  # {nested_area, weight, similarity}
    d_hallucination_renormalized: float = 0.0
    n_segments: int = 0
    n_nested: int = 0
    n_overlapping: int = 0

    def to_dict(self) -> dict:
        return {
            "d_context": self.d_context,
            "d_hallucination": self.d_hallucination,
            "cfd": self.cfd,
            "d_hallucination_renormalized": self.d_hallucination_renormalized,
            "n_segments": self.n_segments,
            "n_nested": self.n_nested,
            "n_overlapping": self.n_overlapping,
            "pairs": self.pairs,
        }


def hallucination_penalty(pairs, embedder, image):
    """Area-weighted feature deviation of nested masks from their neighbors.

    Returns (penalty, per-pair records, renormalized penalty). Weights are
    nested areas normalized by the total nested area, so they sum to 1 when
    every nested mask is paired; an empty pair list scores 0.
    """
    if not pairs:
        return 0.0, [], 0.0
    areas = np.array([float(np.count_nonzero(n)) for n, _ in pairs])
    total = areas.sum()
    records = []
    penalty = 0.0
    for (nested, neighbor), area in zip(pairs, areas):
        sim = float(
            np.dot(embedder.embed(image, nested), embedder.embed(image, neighbor))
        )
        weight = area / total
        penalty += weight * (1.0 - sim)
        records.append({"nested_area": int(area), "weight": weight, "similarity": sim})
    # identical unless some nested mass was dropped before pairing
    renorm = penalty / sum(r["weight"] for r in records)
    return float(penalty), records, float(renorm)


def context_coherence(image, edit_mask, embedder) -> float:
    """1 - cosine similarity between the filled region and its bbox surround."""
    edit = np.asarray(edit_mask).astype(bool)
    if not edit.any():
        raise EmptyMaskError("edit mask is empty")
    ring = _context_ring(edit)
    f_in = embedder.embed(image, edit)
    f_out = embedder.embed(image, ring)
    return float(1.0 - np.dot(f_in, f_out))


def cfd_score(edit_mask, image, segmenter=None, embedder=None) -> CfdReport:
    """Full score for one removal result; deterministic given the backends."""
    segmenter = segmenter if segmenter is not None else ColorComponentSegmenter()
    embedder = embedder if embedder is not None else HistogramEmbedder()
    segments = segmenter.segment(image)
    taxonomy = classify_masks(segments, edit_mask)
    pairs = pair_merge(taxonomy)
    d_h, records, d_h_renorm = hallucination_penalty(pairs, embedder, image)
    d_c = context_coherence(image, edit_mask, embedder)
    return CfdReport(
        d_context=d_c,
        d_hallucination=d_h,
        cfd=d_c + d_h,
        pairs=records,
        d_hallucination_renormalized=d_h_renorm,
        n_segments=len(segments),
        n_nested=len(taxonomy.nested),
        n_overlapping=len(taxonomy.overlapping),
    )
