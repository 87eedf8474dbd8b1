"""cflab: conditional flow-matching object removal/insertion at desk scale.

A numpy library covering the full loop: tape-based autodiff and Adam,
linear-path flow matching, a deterministic synthetic-scene corpus, mask
morphology and augmentation, a low-rank-adapter editor with paired warmup
and unpaired remove-reinsert post-training, reference metrics, and a
reference-free removal score built on pluggable segmentation/embedding
backends.
"""

from . import cfd, editor, flowmatch, maskops, metrics, numerics, ppm, scenes

__version__ = "0.1.0"

__all__ = [
    "cfd",
    "editor",
    "flowmatch",
    "maskops",
    "metrics",
    "numerics",
    "ppm",
    "scenes",
    "__version__",
]
