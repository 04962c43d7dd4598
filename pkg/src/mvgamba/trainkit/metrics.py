"""Image fidelity metrics."""

from __future__ import annotations

import math

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 99.0


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(pred, gt) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images report the cap (99 dB)."""
    mse = float(np.mean((_np(pred) - _np(gt)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def ssim(pred, gt) -> float:
    """SSIM with an 11 x 11 Gaussian window (sigma 1.5) and the standard K1 = 0.01, K2 = 0.03."""
    a, b = _np(pred), _np(gt)
    return float(structural_similarity(a, b, data_range=1.0, channel_axis=-1 if a.ndim == 3 else None,
                                       gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                       win_size=11))
