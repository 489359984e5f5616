"""PSNR, SSIM and MS-SSIM on (C, H, W) images.

Values are computed per channel in float64 and averaged over channels.
Callers holding network outputs in [-1, 1] should map them with
:func:`to_unit_range` and use ``data_range=1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


def to_unit_range(image):
    return (np.asarray(image, dtype=np.float64) + 1.0) / 2.0


def _as_chw(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (H, W) images, got shape {a.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    a, b = _as_chw(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D array with a 1-D window."""
    n = taps.size
    h, w = img.shape
    rows = sum(taps[i] * img[i:h - n + 1 + i, :] for i in range(n))
    return sum(taps[j] * rows[:, j:w - n + 1 + j] for j in range(n))


def _ssim_maps(a: np.ndarray, b: np.ndarray, data_range: float, k1: float, k2: float, taps):
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    luminance = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    contrast_structure = (2 * cov + c2) / (var_a + var_b + c2)
    return luminance, contrast_structure


def _check_window(shape, size):
    if shape[-2] < size or shape[-1] < size:
        raise ValueError(f"image {shape[-2]}x{shape[-1]} is smaller than the {size}x{size} window")


def ssim(
    a,
    b,
    data_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
    window_size: int = WINDOW_SIZE,
    sigma: float = WINDOW_SIGMA,
) -> float:
    """Mean local SSIM index over valid window positions and channels."""
    a, b = _as_chw(a, b)
    _check_window(a.shape, window_size)
    taps = gaussian_window(window_size, sigma)
    vals = []
    for ca, cb in zip(a, b):
        lum, cs = _ssim_maps(ca, cb, data_range, k1, k2, taps)
        vals.append(float(np.mean(lum * cs)))
    return float(np.mean(vals))


def _pool2(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim_scales(height: int, width: int, max_scales: int = 5, window_size: int = WINDOW_SIZE) -> int:
    """Largest scale count whose coarsest level still fits the window."""
    s = 0
    h, w = height, width
    while s < max_scales and h >= window_size and w >= window_size:
        s += 1
        h, w = h // 2, w // 2
    return s


def ms_ssim(
    a,
    b,
    data_range: float = 1.0,
    scales: int = 5,
    weights: Sequence[float] = MS_SSIM_WEIGHTS,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Multi-scale SSIM with 2x2 mean pooling between scales.

    When the image is too small for ``scales`` levels the scale count is
    reduced and the leading weights are renormalized to sum to one.
    Negative contrast-structure terms are clamped to zero before the
    fractional power.
    """
    a, b = _as_chw(a, b)
    _check_window(a.shape, WINDOW_SIZE)
    n = min(scales, len(weights), ms_ssim_scales(a.shape[1], a.shape[2], scales))
    w = np.asarray(weights[:n], dtype=np.float64)
    if n < len(weights):
        # the standard five weights sum to 1.0001; only a truncated set is renormalized
        w = w / w.sum()
    taps = gaussian_window()
    vals = []
    for ca, cb in zip(a, b):
        value = 1.0
        for level in range(n):
            lum, cs = _ssim_maps(ca, cb, data_range, k1, k2, taps)
            term = float(np.mean(lum * cs)) if level == n - 1 else float(np.mean(cs))
            value *= max(term, 0.0) ** w[level]
            if level < n - 1:
                ca, cb = _pool2(ca), _pool2(cb)
        vals.append(value)
    return float(np.mean(vals))


@dataclass
class MetricReport:
    names: List[str] = field(default_factory=list)
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    ms_ssim: List[float] = field(default_factory=list)

    def add(self, name, restored, reference, data_range: float = 1.0) -> None:
        self.names.append(name)
        self.psnr.append(psnr(restored, reference, data_range))
        self.ssim.append(ssim(restored, reference, data_range))
        self.ms_ssim.append(ms_ssim(restored, reference, data_range))

    @property
    def count(self) -> int:
        return len(self.names)

    def mean(self, metric: str) -> float:
        values = getattr(self, metric)
        return float(np.mean(values)) if values else float("nan")

    def to_table(self) -> str:
        width = max([len("image"), len("mean")] + [len(n) for n in self.names])
        lines = [f"{'image':<{width}}  {'PSNR(dB)':>9}  {'SSIM':>8}  {'MS-SSIM':>8}"]
        lines.append("-" * len(lines[0]))
        for row in zip(self.names, self.psnr, self.ssim, self.ms_ssim):
            lines.append(f"{row[0]:<{width}}  {row[1]:9.3f}  {row[2]:8.4f}  {row[3]:8.4f}")
        lines.append("-" * len(lines[0]))
        lines.append(
            f"{'mean':<{width}}  {self.mean('psnr'):9.3f}  {self.mean('ssim'):8.4f}  "
            f"{self.mean('ms_ssim'):8.4f}   ({self.count} images)"
        )
        return "\n".join(lines)

    def to_tsv(self) -> str:
        rows = [
            f"{n}\t{p:.6f}\t{s:.6f}\t{m:.6f}"
            for n, p, s, m in zip(self.names, self.psnr, self.ssim, self.ms_ssim)
        ]
        rows.append(
            f"mean\t{self.mean('psnr'):.6f}\t{self.mean('ssim'):.6f}\t{self.mean('ms_ssim'):.6f}"
        )
        return "\n".join(rows) + "\n"


def evaluate(restored: Sequence, reference: Sequence, names=None, data_range: float = 1.0) -> MetricReport:
    report = MetricReport()
    names = names or [f"{i:04d}" for i in range(len(restored))]
    for name, r, ref in zip(names, restored, reference):
        report.add(name, r, ref, data_range)
    return report
