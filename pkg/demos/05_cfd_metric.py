"""
Scoring removal quality without a reference
===========================================

Build two candidate "removal results" for the same masked region: one that
matches the background and one with an alien blob painted inside the hole.
The score segments the image, singles out segments fully nested in the
edit mask, pairs them with their surrounding segments, and charges feature
deviation; a context term compares the filled region against its
bounding-box surroundings. No ground-truth image is consulted at any
point, yet the hallucinated result ranks clearly worse.
"""

import numpy as np

from cflab import cfd, scenes

spec = scenes.SceneSpec(
    height=48,
    width=48,
    bg_style="gradient",
    bg_color=(0.65, 0.7, 0.75),
    bg_color2=(0.45, 0.5, 0.55),
    center=(24.0, 24.0),
    size=8.0,
)
triplet = scenes.render_scene(spec)
mask = triplet.mask

clean = triplet.removed.copy()  # the ideal fill: the true background
hallucinated = clean.copy()
yy, xx = np.mgrid[0:48, 0:48]
blob = (yy - 24) ** 2 + (xx - 24) ** 2 <= 16
hallucinated[blob] = (0.9, 0.8, 0.1)  # a bright alien object inside the hole

for name, image in (("clean fill", clean), ("hallucinated", hallucinated)):
    report = cfd.cfd_score(mask, image)
    print(
        f"{name:13s} cfd={report.cfd:.4f}  "
        f"context={report.d_context:.4f}  hallucination={report.d_hallucination:.4f}  "
        f"segments={report.n_segments} nested={report.n_nested}"
    )
    for pair in report.pairs:
        print(
            f"               nested area {pair['nested_area']:3d} "
            f"weight {pair['weight']:.2f} similarity {pair['similarity']:.3f}"
        )

# the two backends disagree on values but agree on the ordering
for embedder in (cfd.HistogramEmbedder(), cfd.MomentEmbedder()):
    a = cfd.cfd_score(mask, clean, embedder=embedder).cfd
    b = cfd.cfd_score(mask, hallucinated, embedder=embedder).cfd
    print(f"{type(embedder).__name__:18s} clean={a:.4f} hallucinated={b:.4f} worse={b > a}")
