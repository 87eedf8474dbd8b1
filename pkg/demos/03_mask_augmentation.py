"""
Mask morphology and the two augmentation styles
===============================================

Removal training sees deliberately imprecise masks: dilated or eroded,
boundary-jittered, with random blobs added or removed. Insertion training
instead expands masks to bounding boxes or convex hulls, since the exact
silhouette is unknown at insertion time. Everything below is pure
morphology on {0,1} grids, printed as ASCII so the effects are visible in
a terminal.
"""

import numpy as np

from cflab import maskops


def show(title, *masks):
    print(f"--- {title}")
    rows = []
    for y in range(masks[0].shape[0]):
        rows.append("   ".join("".join(".#"[v] for v in m[y]) for m in masks))
    print("\n".join(rows))


yy, xx = np.mgrid[0:16, 0:16]
disc = (((yy - 8) ** 2 + (xx - 8) ** 2) <= 16).astype(np.uint8)

show("disc | dilate r=2 | erode r=2", disc, maskops.dilate(disc, 2), maskops.erode(disc, 2))

# a dilation then erosion (closing) never loses convex content
closed = maskops.erode(maskops.dilate(disc, 2), 2)
assert np.all(closed.astype(bool) >= disc.astype(bool))

rng = np.random.default_rng(4)
cfg = maskops.AugmentConfig(
    radius_range=(0, 2),
    jitter_amplitude=0.2,
    shape_add=1,
    shape_remove=1,
    shape_size=(1.5, 3.0),
)
show(
    "removal-style augmentations (three draws)",
    maskops.augment_removal(disc, cfg, rng),
    maskops.augment_removal(disc, cfg, rng),
    maskops.augment_removal(disc, cfg, rng),
)

scatter = np.zeros((16, 16), dtype=np.uint8)
for y, x in [(3, 4), (11, 3), (7, 12), (12, 11), (4, 9)]:
    scatter[y, x] = 1
show(
    "scatter | convex hull | bbox",
    scatter,
    maskops.to_convex_hull(scatter),
    maskops.to_bbox(scatter),
)

hull = maskops.to_convex_hull(scatter)
bbox = maskops.to_bbox(scatter)
assert np.all(scatter <= hull) and np.all(hull <= bbox)
print("containment chain holds: mask <= hull <= bbox")
