"""PSNR / SSIM and quality-fluctuation statistics on Y frames in [0, 1]."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

PSNR_CAP = 100.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical frames."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 11:
        raise ValueError(f"frame {a.shape} smaller than the 11x11 window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    g = _gaussian_window()
    mu1 = _filter_valid(a, g)
    mu2 = _filter_valid(b, g)
    mu1_sq = mu1 * mu1
    mu2_sq = mu2 * mu2
    mu12 = mu1 * mu2
    s1 = _filter_valid(a * a, g) - mu1_sq
    s2 = _filter_valid(b * b, g) - mu2_sq
    s12 = _filter_valid(a * b, g) - mu12
    num = (2 * mu12 + c1) * (2 * s12 + c2)
    den = (mu1_sq + mu2_sq + c1) * (s1 + s2 + c2)
    return float(np.mean(num / den))


def delta_metrics(enhanced, compressed, gt) -> tuple[float, float]:
    """Mean per-frame PSNR and SSIM gains of ``enhanced`` over ``compressed``."""
    enhanced, compressed, gt = (np.asarray(v) for v in (enhanced, compressed, gt))
    if not (len(enhanced) == len(compressed) == len(gt)):
        raise ValueError("clips differ in frame count")
    if not (enhanced.shape == compressed.shape == gt.shape):
        raise ValueError("clips differ in frame size")
    dp = [psnr(e, g) - psnr(c, g) for e, c, g in zip(enhanced, compressed, gt)]
    ds = [ssim(e, g) - ssim(c, g) for e, c, g in zip(enhanced, compressed, gt)]
    return float(np.mean(dp)), float(np.mean(ds))


def _collapse(curve: np.ndarray) -> np.ndarray:
    keep = np.ones(len(curve), dtype=bool)
    keep[1:] = curve[1:] != curve[:-1]
    return curve[keep]


def peak_valley_difference(curve) -> float | None:
    """Mean drop from each local peak to the next local valley, or None.

    Plateaus count as a single point; the first and last points count as
    extrema when they differ from their only neighbour.
    """
    c = np.asarray(curve, dtype=np.float64)
    if len(c) < 3:
        return None
    c = _collapse(c)
    if len(c) < 2:
        return None
    kinds = []
    for i, v in enumerate(c):
        left = c[i - 1] if i > 0 else None
        right = c[i + 1] if i < len(c) - 1 else None
        nbrs = [n for n in (left, right) if n is not None]
        if all(v > n for n in nbrs):
            kinds.append(("peak", v))
        elif all(v < n for n in nbrs):
            kinds.append(("valley", v))
    drops = []
    pending = None
    for kind, v in kinds:
        if kind == "peak":
            pending = v
        elif pending is not None:
            drops.append(pending - v)
            pending = None
    if not drops:
        return None
    return float(np.mean(drops))


def quality_fluctuation(curve) -> tuple[float | None, float]:
    """(PVD, SD) of a per-frame PSNR curve. SD is the population deviation."""
    c = np.asarray(curve, dtype=np.float64)
    if len(c) < 1:
        raise ValueError("empty curve")
    return peak_valley_difference(c), float(np.std(c))


@dataclass
class MetricsReport:
    per_frame_psnr: list[float]
    per_frame_ssim: list[float]
    delta_psnr: float
    delta_ssim: float
    pvd: float | None
    sd: float
    compressed_psnr: list[float] | None = None
    compressed_ssim: list[float] | None = None

    @classmethod
    def build(cls, enhanced, compressed, gt) -> "MetricsReport":
        enhanced, compressed, gt = (np.asarray(v) for v in (enhanced, compressed, gt))
        dp, ds = delta_metrics(enhanced, compressed, gt)
        pe = [psnr(e, g) for e, g in zip(enhanced, gt)]
        se = [ssim(e, g) for e, g in zip(enhanced, gt)]
        pc = [psnr(c, g) for c, g in zip(compressed, gt)]
        sc = [ssim(c, g) for c, g in zip(compressed, gt)]
        pvd, sd = quality_fluctuation(pe)
        return cls(pe, se, dp, ds, pvd, sd, pc, sc)

    def to_json(self, path) -> None:
        from .fileio import atomic_write

        with atomic_write(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)

    def to_csv(self, path) -> None:
        from .fileio import atomic_write

        with atomic_write(path, "w") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr", "ssim", "compressed_psnr", "compressed_ssim"])
            n = len(self.per_frame_psnr)
            cp = self.compressed_psnr or [""] * n
            cs = self.compressed_ssim or [""] * n
            for i in range(n):
                w.writerow([i + 1, self.per_frame_psnr[i], self.per_frame_ssim[i], cp[i], cs[i]])
