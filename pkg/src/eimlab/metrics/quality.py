"""PSNR, SSIM and their background-masked variants."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(a: np.ndarray, b: np.ndarray, win: np.ndarray) -> float:
    c1, c2 = (K1 * 1.0) ** 2, (K2 * 1.0) ** 2
    wa = sliding_window_view(a, win.shape)
    wb = sliding_window_view(b, win.shape)
    mu_a = np.einsum("ijkl,kl->ij", wa, win)
    mu_b = np.einsum("ijkl,kl->ij", wb, win)
    var_a = np.einsum("ijkl,kl->ij", wa * wa, win) - mu_a**2
    var_b = np.einsum("ijkl,kl->ij", wb * wb, win) - mu_b**2
    cov = np.einsum("ijkl,kl->ij", wa * wb, win) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"raster {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., ch], b[..., ch], win) for ch in range(a.shape[2])]))


def masked_background_metrics(source, edited) -> tuple[float, float]:
    """(PSNR over background pixels, SSIM after pasting the source object back).

    ``source`` is a Scene. SSIM needs whole windows, so the object region of
    the edited raster is replaced by the source's before comparison; any
    difference that remains lies in the background.
    """
    bg = np.asarray(source.background_mask, dtype=bool)
    if not bg.any():
        raise ValueError("background mask is empty")
    ref, out = _check_pair(source.raster, edited)
    diff = (ref - out)[bg]
    mse = float(np.mean(diff**2))
    p = PSNR_CAP if mse == 0.0 else min(PSNR_CAP, -10.0 * math.log10(mse))
    composite = np.where(bg[..., None], out, ref)
    return p, ssim(ref, composite)
