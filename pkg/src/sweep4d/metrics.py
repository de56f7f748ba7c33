"""Quantitative evaluation: PSNR, SSIM, classification accuracy/confusion."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .breath import RespiratoryLabeling
from .errors import DataError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5


@dataclass
class EvalReport:
    psnr: float | None = None
    ssim: float | None = None
    accuracy: float | None = None
    adjacent_accuracy: float | None = None
    confusion: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "psnr": self.psnr if self.psnr is None or math.isfinite(self.psnr)
            else "inf",
            "ssim": self.ssim,
            "accuracy": self.accuracy,
            "adjacent_accuracy": self.adjacent_accuracy,
            "metadata": self.metadata,
        }
        if self.confusion is not None:
            out["confusion"] = [[int(c) for c in row] for row in self.confusion]
        return out

    def write_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def csv_row(self) -> list:
        return [self.psnr, self.ssim, self.accuracy, self.adjacent_accuracy]


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b) -> float:
    """10 log10(MAX^2 / MSE) with MAX taken from the reference ``b``.

    Asymmetric by construction when max(a) != max(b); identical inputs map
    to +inf.
    """
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DataError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(np.max(np.abs(y)))
    if peak == 0.0:
        peak = 1.0
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel2d(sigma=SSIM_SIGMA, radius=SSIM_RADIUS) -> np.ndarray:
    ax = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim2d(a: np.ndarray, b: np.ndarray, dynamic_range=None) -> float:
    """Mean local SSIM of two 2D images over the valid (full-window) region."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DataError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if dynamic_range is None:
        dynamic_range = float(y.max() - y.min())
    if dynamic_range == 0.0:
        # zero-variance reference: luminance term only
        mu_a, mu_b = float(x.mean()), float(y.mean())
        c1 = (SSIM_K1 * max(abs(mu_b), 1.0)) ** 2
        return (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    kernel = _gaussian_kernel2d()
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2

    def filt(img):
        return ndimage.correlate(img, kernel, mode="constant")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2))
    r = SSIM_RADIUS
    valid = ssim_map[r:-r or None, r:-r or None] if min(x.shape) > 2 * r else ssim_map
    return float(valid.mean())


def ssim(a, b) -> float:
    """SSIM between volumes/stacks (per-slice mean) or single 2D images.

    The dynamic range is shared across slices (taken from the whole
    reference), so the per-slice values are comparable before averaging.
    """
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DataError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        return ssim2d(x, y)
    if x.ndim != 3:
        raise DataError("ssim expects 2D or 3D inputs")
    dr = float(y.max() - y.min())
    return float(np.mean([ssim2d(x[i], y[i], dynamic_range=dr)
                          for i in range(x.shape[0])]))


def classification_report(pred: RespiratoryLabeling,
                          truth: RespiratoryLabeling) -> EvalReport:
    """Accuracy, K x K confusion, and adjacent-class (off-by-one) accuracy."""
    if pred.T != truth.T:
        raise DataError("labelings have different lengths")
    if pred.num_states != truth.num_states:
        raise DataError("labelings have different K")
    K = truth.num_states
    p = np.asarray(pred.states)
    t = np.asarray(truth.states)
    confusion = np.zeros((K, K), dtype=int)
    np.add.at(confusion, (t, p), 1)
    accuracy = float(np.trace(confusion) / confusion.sum())
    diff = np.abs(p - t)
    adjacent = float(np.mean(np.minimum(diff, K - diff) <= 1))
    return EvalReport(
        accuracy=accuracy,
        adjacent_accuracy=adjacent,
        confusion=confusion,
        metadata={"num_states": K, "n_slices": int(pred.T),
                  "pred_source": pred.source, "truth_source": truth.source},
    )


def write_csv_rows(path, rows, header=None) -> None:
    """Flat CSV for aggregating reports across seeds."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        for row in rows:
            w.writerow(row)
