"""Image reconstruction metrics: MAE, PSNR, SSIM and its multi-scale form.

The structural metrics use the standard 11-tap Gaussian window (sigma 1.5)
with valid-window statistics and stability constants (0.01 * L)^2 and
(0.03 * L)^2 for data range L. The multi-scale variant runs five scales with
equal exponents of 1/5 on every factor, downsampling by 2x average pooling
between scales; inputs too small for five scales fall back to the largest
feasible count with a warning.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

MS_SSIM_SCALES = 5
_WIN_SIZE = 11
_WIN_SIGMA = 1.5


def mae(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Mean absolute pixel difference."""
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.mean(np.abs(y - y_hat)))


def mse(y: np.ndarray, y_hat: np.ndarray) -> float:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    return float(np.mean((y - y_hat) ** 2))


def psnr(y: np.ndarray, y_hat: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs report +inf."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(y, y_hat)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / err)


def _gaussian_window(size: int = _WIN_SIZE, sigma: float = _WIN_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_components(y, y_hat, data_range, win):
    """Mean luminance term and mean contrast-structure term over valid windows."""
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x = fftconvolve(y, win, mode="valid")
    mu_y = fftconvolve(y_hat, win, mode="valid")
    xx = fftconvolve(y * y, win, mode="valid") - mu_x**2
    yy = fftconvolve(y_hat * y_hat, win, mode="valid") - mu_y**2
    xy = fftconvolve(y * y_hat, win, mode="valid") - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * xy + c2) / (xx + yy + c2)
    return float(lum.mean()), float(cs.mean()), float((lum * cs).mean())


def _as_2d(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    img = np.squeeze(img)
    if img.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {img.shape}")
    return img


def ssim(y, y_hat, *, data_range: float = 1.0) -> float:
    """Single-scale structural similarity, mean over the valid window map."""
    y, y_hat = _as_2d(y), _as_2d(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    if min(y.shape) < _WIN_SIZE:
        raise ValueError(f"image smaller than the {_WIN_SIZE}-tap window")
    return _ssim_components(y, y_hat, data_range, _gaussian_window())[2]


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(y, y_hat, *, data_range: float = 1.0, scales: int = MS_SSIM_SCALES) -> float:
    """Multi-scale structural similarity with equal per-scale exponents.

    Contrast-structure factors enter at every scale and the luminance factor
    only at the coarsest; each exponent is 1 / scales. Negative factor means
    are clamped at zero before the fractional power.
    """
    y, y_hat = _as_2d(y), _as_2d(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    feasible = int(math.floor(math.log2(min(y.shape) / _WIN_SIZE))) + 1
    if feasible < 1:
        raise ValueError(f"image smaller than the {_WIN_SIZE}-tap window")
    if feasible < scales:
        warnings.warn(
            f"image {y.shape} supports only {feasible} of {scales} scales; reducing",
            stacklevel=2,
        )
        scales = feasible
    win = _gaussian_window()
    weight = 1.0 / scales
    value = 1.0
    for j in range(scales):
        lum, cs, _ = _ssim_components(y, y_hat, data_range, win)
        value *= max(cs, 0.0) ** weight
        if j == scales - 1:
            value *= max(lum, 0.0) ** weight
        else:
            y, y_hat = _downsample2(y), _downsample2(y_hat)
    return float(value)


def paired_difference(a: list, b: list) -> dict:
    """Mean, std and t statistic of per-sample differences a - b."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired comparison needs equal-length lists")
    d = a - b
    n = d.size
    std = float(d.std(ddof=1)) if n > 1 else 0.0
    t_stat = float(d.mean() / (std / math.sqrt(n))) if std > 0 else math.inf * np.sign(d.mean() or 1)
    return {"mean_diff": float(d.mean()), "std_diff": std, "n": int(n), "t_stat": t_stat}


@dataclass
class MetricReport:
    """Per-sample metric values with their aggregates."""

    per_sample: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(next(iter(self.per_sample.values()), []))

    def aggregates(self) -> dict:
        return {k: float(np.mean(v)) for k, v in self.per_sample.items()}

    def to_json(self) -> str:
        return json.dumps(
            {"n": self.n, "aggregates": self.aggregates(), "per_sample": self.per_sample},
            indent=2, sort_keys=True,
        )

    def write(self, out_dir, stem: str = "metrics") -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(self.to_json())
        csv_path = out_dir / f"{stem}.csv"
        names = list(self.per_sample)
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample"] + names)
            for i in range(self.n):
                writer.writerow([i] + [self.per_sample[k][i] for k in names])
            writer.writerow(["mean"] + [self.aggregates()[k] for k in names])
        return {"json": json_path, "csv": csv_path}


def evaluate_pairs(y_true, y_pred, *, data_range: float = 1.0) -> MetricReport:
    """Standard metric suite over matched lists of single-channel images."""
    report = MetricReport(per_sample={"mae": [], "ms_ssim": [], "ssim": [], "psnr": []})
    for yt, yp in zip(y_true, y_pred):
        report.per_sample["mae"].append(mae(yt, yp))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report.per_sample["ms_ssim"].append(ms_ssim(yt, yp, data_range=data_range))
        report.per_sample["ssim"].append(ssim(yt, yp, data_range=data_range))
        report.per_sample["psnr"].append(psnr(yt, yp, peak=data_range))
    return report
