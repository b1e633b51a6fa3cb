"""Reference-based fidelity metrics computed on the luma channel.

Color conversion follows BT.601 full-range (JPEG) for images in [0,1]:

    Y  =  0.299 R + 0.587 G + 0.114 B
    Cb = -0.168736 R - 0.331264 G + 0.5 B + 0.5
    Cr =  0.5 R - 0.418688 G - 0.081312 B + 0.5
"""

from __future__ import annotations

import numpy as np

_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
], dtype=np.float64)

PSNR_CAP = 99.0


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB in [0,1] -> (3, H, W) YCbCr; Cb/Cr offset by 0.5."""
    if img.shape[0] != 3:
        raise ValueError(f"expected channel-first RGB, got shape {img.shape}")
    out = np.einsum("kc,chw->khw", _YCBCR, img.astype(np.float64))
    out[1] += 0.5
    out[2] += 0.5
    return out


def _luma(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img.astype(np.float64)
    return np.einsum("c,chw->hw", _YCBCR[0], img.astype(np.float64))


def psnr_y(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio on Y, peak 1.0; identical images cap at 99 dB."""
    if a.shape != b.shape:
        raise ValueError(f"psnr_y shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((_luma(a) - _luma(b)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.einsum("hwuv,uv->hw", view, win)


def ssim_y(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on Y over valid 11x11 window positions (sigma 1.5)."""
    if a.shape != b.shape:
        raise ValueError(f"ssim_y shape mismatch: {a.shape} vs {b.shape}")
    ya, yb = _luma(a), _luma(b)
    win = _gaussian_window()
    if ya.shape[0] < win.shape[0] or ya.shape[1] < win.shape[1]:
        raise ValueError(f"image {ya.shape} smaller than the {win.shape[0]}x{win.shape[1]} window")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_a = _windowed_mean(ya, win)
    mu_b = _windowed_mean(yb, win)
    var_a = _windowed_mean(ya * ya, win) - mu_a * mu_a
    var_b = _windowed_mean(yb * yb, win) - mu_b * mu_b
    cov = _windowed_mean(ya * yb, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
