"""PSNR / SSIM in RGB and directory evaluation."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .data import DataMismatchError, list_images, load_image

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian over the last two axes, keeping only fully covered pixels."""
    r = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=-1, mode="constant"), g, axis=-2, mode="constant")
    return out[..., r:out.shape[-2] - r, r:out.shape[-1] - r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over valid window positions, computed per channel then averaged."""
    a, b = _check_pair(a, b)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    per_channel = s.reshape(-1, *s.shape[-2:]).mean(axis=(-2, -1))
    return float(per_channel.mean())


@dataclass
class EvalRow:
    id: str
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else float("nan")

    def table(self) -> str:
        lines = [f"{'id':<16} {'PSNR':>8} {'SSIM':>8} {'LPIPS':>6}"]
        lines += [f"{r.id:<16} {r.psnr_db:8.3f} {r.ssim:8.4f} {'n/a':>6}" for r in self.rows]
        lines.append(f"{'mean':<16} {self.mean_psnr:8.3f} {self.mean_ssim:8.4f} {'n/a':>6}")
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write("id,psnr_db,ssim\n")
        for r in self.rows:
            buf.write(f"{r.id},{r.psnr_db:.6f},{r.ssim:.6f}\n")
        return buf.getvalue()


def evaluate_dir(pred_dir, gt_dir) -> EvalReport:
    pred, gt = list_images(pred_dir), list_images(gt_dir)
    missing = sorted(set(pred) ^ set(gt))
    if missing:
        raise DataMismatchError("files without a counterpart", missing)
    rows = []
    for key in sorted(pred):
        a, b = load_image(pred[key]), load_image(gt[key])
        if a.shape != b.shape:
            raise DataMismatchError("prediction and target dims differ", [key])
        rows.append(EvalRow(key, psnr(a, b), ssim(a, b)))
    return EvalReport(rows)


def write_csv(report: EvalReport, path) -> None:
    Path(path).write_text(report.csv(), encoding="utf-8")
