"""
Synthetic scenes and removal triplets
=====================================

Every training sample is a fully synthetic scene: a simple background, one
flat-colored object, a multiplicative shadow, and (sometimes) a mirrored
reflection. The renderer also emits the ground-truth object-free image and
the object mask, which is what makes desk-scale removal training and honest
region metrics possible. Effects deliberately stay OUTSIDE the mask: a
removal model must learn to erase them beyond the marked region.
"""

from pathlib import Path

import numpy as np

from cflab import ppm, scenes

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

spec = scenes.SceneSpec(
    height=64,
    width=64,
    bg_style="gradient",
    bg_color=(0.7, 0.75, 0.8),
    bg_color2=(0.35, 0.4, 0.5),
    shape="disc",
    shape_color=(0.85, 0.25, 0.2),
    center=(28.0, 30.0),
    size=9.0,
    shadow_offset=(5, 5),
    shadow_attenuation=0.5,
    reflection=True,
    reflection_attenuation=0.35,
)
triplet = scenes.render_scene(spec)

print("scene pieces and their supports (pixel counts):")
print("  object  :", int(triplet.mask.sum()))
print("  shadow  :", int(triplet.shadow.sum()))
print("  mirror  :", int(triplet.reflection.sum()))

# the invariant the whole corpus rests on: outside the object and its
# effects, the scene and its ground-truth removal are identical
support = (triplet.mask | triplet.shadow | triplet.reflection).astype(bool)
assert np.array_equal(triplet.image[~support], triplet.removed[~support])
print("effect locality holds: image == removed outside object+effects")

masked = scenes.masked_input(triplet.image, triplet.mask)
panel = np.hstack([triplet.image, masked, triplet.removed, triplet.reference])
ppm.write_ppm(OUT / "triplet_panel.ppm", panel)
print(f"wrote {OUT / 'triplet_panel.ppm'} (scene | masked | removed | reference)")

# a small corpus: same seed, same bytes, every time
corpus_dir = OUT / "mini_corpus"
scenes.gen_corpus(6, scenes.SceneSpec(height=64, width=64), "paired", 123, corpus_dir)
h1 = scenes.manifest_hash(corpus_dir)
scenes.gen_corpus(6, scenes.SceneSpec(height=64, width=64), "paired", 123, corpus_dir)
assert scenes.manifest_hash(corpus_dir) == h1
print("corpus regeneration is byte-identical, manifest sha256:", h1[:16], "...")

for rec in scenes.read_manifest(corpus_dir)[:3]:
    s = scenes.load_sample(corpus_dir, rec)
    print(
        f"  sample {rec['id']}: bg={rec['spec']['bg_style']:<8s} "
        f"shape={rec['spec']['shape']:<8s} mask_px={int(s['mask'].sum())}"
    )
