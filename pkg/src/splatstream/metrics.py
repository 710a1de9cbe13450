"""Image quality metrics and the evaluation report."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, w):
    """Separable correlation keeping only fully-covered positions."""
    rows = sliding_window_view(img, w.size, axis=0) @ w
    return sliding_window_view(rows, w.size, axis=1) @ w


def ssim(a, b, data_range=1.0) -> float:
    """Gaussian-window SSIM averaged over valid pixels and channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WIN or a.shape[1] < SSIM_WIN:
        raise ContractError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}, got {a.shape[:2]}")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass
class EvalReport:
    views: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    wall_time_s: float | None = None
    fps: float | None = None
    n_frames: int | None = None
    gaussians_pre_prune: int | None = None
    gaussians_post_prune: int | None = None
    conf_threshold: float | None = None

    def add(self, name, pred, gt):
        self.views.append(name)
        self.psnr.append(psnr(pred, gt))
        self.ssim.append(ssim(pred, gt))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr)) if self.psnr else None

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else None

    def to_dict(self):
        d = asdict(self)
        d["mean_psnr"] = self.mean_psnr
        d["mean_ssim"] = self.mean_ssim
        return d

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
