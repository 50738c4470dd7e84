"""PSNR and single-scale SSIM on normalized images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    n_images: int

    def lines(self) -> list[str]:
        p = "inf" if math.isinf(self.psnr_db) else f"{self.psnr_db:.6f}"
        return [f"psnr_db={p}", f"ssim={self.ssim:.6f}", f"n_images={self.n_images}"]


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE); identical images report +inf."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    err = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def _gauss_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return g / g.sum()


def _windowed_mean(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    # separable Gaussian filter over valid window positions
    w = SSIM_WINDOW
    rows = np.lib.stride_tricks.sliding_window_view(img, w, axis=1) @ k1d
    return np.lib.stride_tricks.sliding_window_view(rows, w, axis=0) @ k1d


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with a Gaussian 11x11 window (sigma 1.5) over valid positions.

    Uses the population (window-weighted) moments, so identical images give
    exactly 1.0 and constant images reduce to the luminance term.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels per side")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = _gauss_kernel()
    mu_a = _windowed_mean(a, k)
    mu_b = _windowed_mean(b, k)
    ea = _windowed_mean(a * a, k) - mu_a**2
    eb = _windowed_mean(b * b, k) - mu_b**2
    eab = _windowed_mean(a * b, k) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * eab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (ea + eb + c2)
    return float(np.mean(num / den))


def report(pairs: list[tuple[np.ndarray, np.ndarray]], data_range: float = 1.0) -> MetricReport:
    """Aggregate metrics over (reconstruction, reference) pairs."""
    if not pairs:
        raise ValueError("no image pairs given")
    ps = [psnr(x, y, data_range) for x, y in pairs]
    ss = [ssim(x, y, data_range) for x, y in pairs]
    mean_psnr = math.inf if any(math.isinf(p) for p in ps) else float(np.mean(ps))
    return MetricReport(mean_psnr, float(np.mean(ss)), len(pairs))
