"""PSNR and SSIM, per central slice and per volume."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import GeometryError, Volume

VIEWS = ("axial", "sagittal", "coronal")
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    view: str
    psnr_db: float
    ssim: float
    slice_index: int | None = None


def _pair(x, ref):
    x = x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)
    ref = ref.data if isinstance(ref, Volume) else np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise GeometryError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def _range(ref, data_range):
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    return data_range


def psnr(x, ref, data_range: float | None = None) -> float:
    """``10 log10(range^2 / MSE)`` in dB; ``inf`` when the inputs are identical.

    ``data_range`` defaults to the dynamic range of ``ref``.
    """
    x, ref = _pair(x, ref)
    data_range = _range(ref, data_range)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img, g):
    # 'reflect' is the half-sample symmetric extension (d c b a | a b c d)
    return correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")


def ssim_map(x, ref, data_range: float | None = None) -> np.ndarray:
    x, ref = _pair(x, ref)
    if x.ndim != 2:
        raise GeometryError("SSIM needs 2D images")
    if min(x.shape) < SSIM_WIN:
        raise GeometryError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape}")
    data_range = _range(ref, data_range)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    g = gaussian_window()
    mu_x, mu_y = _blur(x, g), _blur(ref, g)
    sxx = _blur(x * x, g) - mu_x**2
    syy = _blur(ref * ref, g) - mu_y**2
    sxy = _blur(x * ref, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, ref, data_range: float | None = None) -> float:
    """Mean local SSIM, Gaussian 11x11 window with sigma 1.5, K1=0.01, K2=0.03."""
    return float(np.mean(ssim_map(x, ref, data_range)))


def central_slice(vol: np.ndarray, view: str) -> tuple[int, np.ndarray]:
    """Central slice of a ``(z, y, x)`` array: axial fixes z, sagittal x, coronal y."""
    return take_slice(vol, view, None)


def take_slice(vol: np.ndarray, view: str, index: int | None) -> tuple[int, np.ndarray]:
    axis = {"axial": 0, "coronal": 1, "sagittal": 2}.get(view)
    if axis is None:
        raise ValueError(f"unknown view {view!r}")
    n = vol.shape[axis]
    if index is None:
        index = n // 2
    if not 0 <= index < n:
        raise IndexError(f"{view} index {index} outside [0, {n})")
    return index, np.take(vol, index, axis=axis)


def view_metrics(recon, gt, data_range: float | None = None) -> list[MetricReport]:
    """PSNR/SSIM on the three central slices, then a whole-volume row.

    The volume row holds the PSNR over all voxels and the mean 2D SSIM over
    every axial slice. All rows share one data range, the dynamic range of
    the full ground truth unless given.
    """
    recon, gt = _pair(recon, gt)
    data_range = _range(gt, data_range)
    reports = []
    for view in VIEWS:
        k, r = central_slice(recon, view)
        _, t = central_slice(gt, view)
        reports.append(MetricReport(view, psnr(r, t, data_range), ssim(r, t, data_range), k))
    vol_ssim = float(np.mean([ssim(r, t, data_range) for r, t in zip(recon, gt)]))
    reports.append(MetricReport("volume", psnr(recon, gt, data_range), vol_ssim))
    return reports
