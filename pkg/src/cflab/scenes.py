"""Deterministic synthetic scenes: paired removal triplets and unpaired samples.

A scene is a simple background (flat, gradient, or checker) with one flat
colored object (disc, rectangle, or triangle) that casts a multiplicative
shadow and optionally a vertically mirrored reflection. The object mask
covers the object silhouette only; shadow and reflection lie outside it,
which is the property removal models are trained against.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ppm
from .errors import SceneSpecError, ShapeError

BG_STYLES = ("flat", "gradient", "checker")
SHAPES = ("disc", "rect", "triangle")


@dataclass
class SceneSpec:
    """Full recipe for one scene; rendering is a pure function of this."""

    height: int = 64
    width: int = 64
    bg_style: str = "flat"
    bg_color: tuple = (0.55, 0.6, 0.65)
    bg_color2: tuple = (0.35, 0.4, 0.45)
    bg_axis: str = "x"  # gradient direction: x, y, or diag
    checker_cell: int = 8
    shape: str = "disc"
    shape_color: tuple = (0.85, 0.3, 0.25)
    center: tuple = (32.0, 32.0)  # (row, col)
    size: float = 8.0  # disc radius / rect half-height / triangle half-height
    aspect: float = 1.0  # half-width = size * aspect for rect/triangle
    shadow_offset: tuple = (4, 4)  # (rows down, cols right)
    shadow_attenuation: float = 0.5  # multiplies background; 1.0 disables
    reflection: bool = False
    reflection_attenuation: float = 0.35
    seed: int = 0


def spec_to_dict(spec: SceneSpec) -> dict:
    d = dataclasses.asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def spec_from_dict(d: dict) -> SceneSpec:
    kwargs = dict(d)
    for k in ("bg_color", "bg_color2", "shape_color", "center", "shadow_offset"):
        if k in kwargs:
            kwargs[k] = tuple(kwargs[k])
    return SceneSpec(**kwargs)


@dataclass
class SceneTriplet:
    """Rendered scene with its ground-truth removal and effect supports."""

    image: np.ndarray  # H x W x 3, object + effects
    removed: np.ndarray  # H x W x 3, background only
    mask: np.ndarray  # H x W uint8, object silhouette
    reference: np.ndarray  # H x W x 3, object on neutral gray
    shadow: np.ndarray  # H x W uint8, shadow support (outside object)
    reflection: np.ndarray  # H x W uint8, reflection support (outside object)


def _silhouette(spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = spec.center
    if spec.shape == "disc":
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= spec.size**2).astype(np.uint8)
    if spec.shape == "rect":
        hy, hx = spec.size, spec.size * spec.aspect
        return ((np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)).astype(np.uint8)
    if spec.shape == "triangle":
        # isoceles triangle, apex up: (cy-s, cx), (cy+s, cx-sa), (cy+s, cx+sa)
        s, sa = spec.size, spec.size * spec.aspect
        ay, ax = cy - s, cx
        by, bx = cy + s, cx - sa
        gy, gx = cy + s, cx + sa

        def side(py, px, qy, qx):
            return (qx - px) * (yy - py) - (qy - py) * (xx - px)

        d1 = side(ay, ax, by, bx)
        d2 = side(by, bx, gy, gx)
        d3 = side(gy, gx, ay, ax)
        inside = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
        return inside.astype(np.uint8)
    raise SceneSpecError(f"unknown shape {spec.shape!r}")


def _validate(spec: SceneSpec) -> None:
    if spec.bg_style not in BG_STYLES:
        raise SceneSpecError(f"unknown background style {spec.bg_style!r}")
    if spec.shape not in SHAPES:
        raise SceneSpecError(f"unknown shape {spec.shape!r}")
    if not 0.0 < spec.shadow_attenuation <= 1.0:
        raise SceneSpecError("shadow attenuation must lie in (0, 1]")
    if not 0.0 <= spec.reflection_attenuation < 1.0:
        raise SceneSpecError("reflection attenuation must lie in [0, 1)")
    cy, cx = spec.center
    ext_y = spec.size
    ext_x = spec.size * (spec.aspect if spec.shape != "disc" else 1.0)
    if (
        cy - ext_y < 0
        or cy + ext_y > spec.height - 1
        or cx - ext_x < 0
        or cx + ext_x > spec.width - 1
    ):
        raise SceneSpecError(
            f"object extent ({ext_y:.1f}, {ext_x:.1f}) at {spec.center} "
            f"leaves the {spec.height}x{spec.width} canvas"
        )


def _background(spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    c0 = np.asarray(spec.bg_color, dtype=np.float64)
    c1 = np.asarray(spec.bg_color2, dtype=np.float64)
    if spec.bg_style == "flat":
        return np.broadcast_to(c0, (h, w, 3)).copy()
    if spec.bg_style == "gradient":
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        if spec.bg_axis == "x":
            a = xx / max(w - 1, 1)
        elif spec.bg_axis == "y":
            a = yy / max(h - 1, 1)
        else:
            a = (xx + yy) / max(h + w - 2, 1)
        return c0 + a[..., None] * (c1 - c0)
    if spec.bg_style == "checker":
        cell = max(int(spec.checker_cell), 1)
        yy, xx = np.mgrid[0:h, 0:w]
        par = ((yy // cell) + (xx // cell)) % 2
        return np.where(par[..., None] == 0, c0, c1)
    raise SceneSpecError(f"unknown background style {spec.bg_style!r}")


def _translate(mask, dy, dx):
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def render_scene(spec: SceneSpec) -> SceneTriplet:
    """Render the triplet; deterministic, raises SceneSpecError on bad specs."""
    _validate(spec)
    bg = _background(spec)
    sil = _silhouette(spec)
    obj = sil.astype(bool)

    dy, dx = (int(v) for v in spec.shadow_offset)
    shadow = _translate(sil, dy, dx).astype(bool) & ~obj
    if spec.shadow_attenuation >= 1.0:
        shadow = np.zeros_like(obj)

    refl = np.zeros_like(obj)
    if spec.reflection and spec.reflection_attenuation > 0.0:
        rows = np.nonzero(sil.any(axis=1))[0]
        y_bottom = int(rows.max())
        src_y, src_x = np.nonzero(sil)
        ref_y = 2 * y_bottom + 1 - src_y
        keep = ref_y < spec.height
        refl[ref_y[keep], src_x[keep]] = True
        refl &= ~obj

    image = bg.copy()
    if shadow.any():
        image[shadow] *= spec.shadow_attenuation
    if refl.any():
        ra = spec.reflection_attenuation
        color = np.asarray(spec.shape_color, dtype=np.float64)
        image[refl] = image[refl] * (1.0 - ra) + color * ra
    image[obj] = np.asarray(spec.shape_color, dtype=np.float64)

    reference = np.full_like(bg, 0.5)
    reference[obj] = np.asarray(spec.shape_color, dtype=np.float64)

    return SceneTriplet(
        image=np.clip(image, 0.0, 1.0),
        removed=np.clip(bg, 0.0, 1.0),
        mask=sil,
        reference=reference,
        shadow=shadow.astype(np.uint8),
        reflection=refl.astype(np.uint8),
    )


def masked_input(image, mask) -> np.ndarray:
    """Zero the image under the mask; all other pixels bit-identical."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.shape} vs image {image.shape}")
    cond = mask.astype(bool)
    if image.ndim == 3:
        cond = cond[..., None]
    return np.where(cond, 0.0, image)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


def _pick_colors(rng, n=3, lo=0.12, hi=0.95, min_sep=0.45):
    """Draw n colors with pairwise L1 separation, so objects stand out."""
    colors = []
    for _ in range(n):
        for _attempt in range(64):
            c = rng.uniform(lo, hi, size=3)
            if all(np.abs(c - np.asarray(p)).sum() >= min_sep for p in colors):
                break
        colors.append(tuple(float(v) for v in c))
    return colors


def random_spec(base: SceneSpec, seed_seq: np.random.SeedSequence) -> SceneSpec:
    """Vary geometry, colors, and effects around a base canvas size."""
    rng = np.random.default_rng(seed_seq)
    h, w = base.height, base.width
    scale = min(h, w) / 64.0
    bg_c, bg_c2, obj_c = _pick_colors(rng)
    size = float(rng.uniform(5.0, 10.0) * scale)
    aspect = float(rng.uniform(0.7, 1.4))
    margin = size * max(aspect, 1.0) + 9.0 * scale
    cy = float(rng.uniform(margin, h - 1 - margin))
    cx = float(rng.uniform(margin, w - 1 - margin))
    off = int(round(rng.uniform(3.0, 5.0) * scale))
    return SceneSpec(
        height=h,
        width=w,
        bg_style=BG_STYLES[rng.integers(0, len(BG_STYLES))],
        bg_color=bg_c,
        bg_color2=bg_c2,
        bg_axis=("x", "y", "diag")[rng.integers(0, 3)],
        checker_cell=int(rng.choice([8, 16]) * scale) or 4,
        shape=SHAPES[rng.integers(0, len(SHAPES))],
        shape_color=obj_c,
        center=(cy, cx),
        size=size,
        aspect=aspect,
        shadow_offset=(off, off if rng.random() < 0.5 else -off),
        shadow_attenuation=float(rng.uniform(0.35, 0.75)),
        reflection=bool(rng.random() < 0.3),
        reflection_attenuation=float(rng.uniform(0.25, 0.5)),
        seed=int(seed_seq.generate_state(1)[0]),
    )


def gen_corpus(n, base_spec: SceneSpec, mode, seed, out_dir) -> Path:
    """Render n scenes to out_dir with a JSON-lines manifest; returns its path.

    mode "paired" stores the ground-truth removal image; "unpaired" omits it.
    Each sample derives its own child seed from ``seed``, so regeneration
    (and any sharding by index) is byte-identical.
    """
    if n < 1:
        raise ShapeError(f"corpus size must be >= 1, got {n}")
    if mode not in ("paired", "unpaired"):
        raise ShapeError(f"mode must be paired or unpaired, got {mode!r}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(n)
    lines = []
    for i, child in enumerate(children):
        spec = random_spec(base_spec, child)
        triplet = render_scene(spec)
        sid = f"{i:06d}"
        paths = {
            "image": f"img/{sid}_image.ppm",
            "mask": f"img/{sid}_mask.pgm",
            "reference": f"img/{sid}_reference.ppm",
        }
        ppm.write_ppm(out_dir / paths["image"], triplet.image)
        ppm.write_pgm(out_dir / paths["mask"], triplet.mask)
        ppm.write_ppm(out_dir / paths["reference"], triplet.reference)
        if mode == "paired":
            paths["removed"] = f"img/{sid}_removed.ppm"
            ppm.write_ppm(out_dir / paths["removed"], triplet.removed)
        rec = {"id": sid, "paths": paths, "spec": spec_to_dict(spec), "mode": mode}
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(corpus_dir) -> list[dict]:
    path = Path(corpus_dir) / "manifest.jsonl"
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def manifest_hash(corpus_dir) -> str:
    path = Path(corpus_dir) / "manifest.jsonl"
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_sample(corpus_dir, record) -> dict:
    """Load one manifest record's images as float arrays plus its spec."""
    corpus_dir = Path(corpus_dir)
    paths = record["paths"]
    out = {
        "id": record["id"],
        "mode": record["mode"],
        "spec": spec_from_dict(record["spec"]),
        "image": ppm.read_ppm(corpus_dir / paths["image"]),
        "mask": ppm.read_mask(corpus_dir / paths["mask"]),
        "reference": ppm.read_ppm(corpus_dir / paths["reference"]),
    }
    if "removed" in paths:
        out["removed"] = ppm.read_ppm(corpus_dir / paths["removed"])
    return out
