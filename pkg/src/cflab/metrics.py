"""Reference-based image metrics (PSNR, SSIM, region MAE) and row emitters."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MetricError, ShapeError

PSNR_CAP = 99.0

SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10*log10(1/MSE) for images in [0, 1]; capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gray(a):
    return a.mean(axis=2) if a.ndim == 3 else a


def ssim(a, b) -> float:
    """Mean local SSIM over 8x8 windows with stride 4 on channel-mean gray."""
    a, b = _pair(a, b)
    ga, gb = _gray(a), _gray(b)
    h, w = ga.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise MetricError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    scores = []
    for y in range(0, h - SSIM_WINDOW + 1, SSIM_STRIDE):
        for x in range(0, w - SSIM_WINDOW + 1, SSIM_STRIDE):
            wa = ga[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW]
            wb = gb[y : y + SSIM_WINDOW, x : x + SSIM_WINDOW]
            mu_a, mu_b = wa.mean(), wb.mean()
            var_a, var_b = wa.var(), wb.var()
            cov = ((wa - mu_a) * (wb - mu_b)).mean()
            num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
            den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
            scores.append(num / den)
    return float(np.mean(scores))


def region_mae(a, b, region) -> float:
    """Mean absolute difference over the pixels selected by ``region``."""
    a, b = _pair(a, b)
    region = np.asarray(region).astype(bool)
    if region.shape != a.shape[:2]:
        raise ShapeError(f"region {region.shape} vs image {a.shape}")
    if not region.any():
        raise MetricError("region is empty")
    return float(np.mean(np.abs(a[region] - b[region])))


@dataclass
class MetricRow:
    """One sample's metric values; ``maes`` maps region name -> MAE."""

    sample_id: str
    psnr: float
    ssim: float
    maes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"id": self.sample_id, "psnr": self.psnr, "ssim": self.ssim}
        for name in sorted(self.maes):
            d[f"mae_{name}"] = self.maes[name]
        return d


def write_rows_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")


def write_rows_csv(path, rows) -> None:
    rows = list(rows)
    cols = ["id", "psnr", "ssim"]
    mae_cols = sorted({f"mae_{k}" for row in rows for k in row.maes})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols + mae_cols, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_dict())


def read_rows_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]
