"""Image quality metrics: PSNR, SSIM, their masked variants and border cropping."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from scipy.signal import convolve2d

from .render import FloatImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(img) -> np.ndarray:
    data = img.data if isinstance(img, FloatImage) else img
    data = np.asarray(data, dtype=np.float64)
    return data[:, :, None] if data.ndim == 2 else data


def _mask_arr(mask, shape) -> np.ndarray:
    m = _arr(mask)[:, :, 0]
    if m.shape != shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {shape[:2]}")
    return m


def psnr(a, b, mask=None) -> float | None:
    """PSNR in dB for images in [0, 1].

    With a mask, the MSE is ``sum(M * |a - b|^2) / (C * sum(M))``. Returns
    ``inf`` for a zero error and None when the mask is empty.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:2]) if mask is None else _mask_arr(mask, a.shape)
    total = m.sum()
    if total == 0:
        return None
    mse = float(np.sum(m[:, :, None] * (a - b) ** 2) / (a.shape[2] * total))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b) -> np.ndarray:
    """Per-window SSIM of the channel-mean grayscale images (valid windows only)."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = a.mean(axis=2)
    y = b.mean(axis=2)
    k = gaussian_kernel()

    def filt(img):
        return convolve2d(img, k, mode="valid")

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx * mx
    vy = filt(y * y) - my * my
    cxy = filt(x * y) - mx * my
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(a, b, mask=None) -> float | None:
    """Mean SSIM; with a mask, the map is averaged with weights equal to the
    mask filtered by the same Gaussian window. None when the mask is empty."""
    a = _arr(a)
    smap = ssim_map(a, b)
    m = np.ones(a.shape[:2]) if mask is None else _mask_arr(mask, a.shape)
    w = convolve2d(m, gaussian_kernel(), mode="valid")
    total = w.sum()
    if total <= 0:
        return None
    return float(np.sum(w * smap) / total)


def border_crop(img, fraction: float = 0.05):
    """Drop ``floor(fraction * dim)`` pixels from every side of an image."""
    if not 0 <= fraction < 0.5:
        raise ValueError("crop fraction must lie in [0, 0.5)")
    data = img.data if isinstance(img, FloatImage) else np.asarray(img)
    h, w = data.shape[:2]
    dy = math.floor(fraction * h)
    dx = math.floor(fraction * w)
    if h - 2 * dy <= 0 or w - 2 * dx <= 0:
        raise ValueError("border crop leaves an empty image")
    out = data[dy : h - dy, dx : w - dx]
    return FloatImage(out, img.semantics) if isinstance(img, FloatImage) else out


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Differentiable per-channel mean SSIM of (H, W, C) tensors, valid windows."""
    k2 = gaussian_kernel()
    g = torch.as_tensor(k2.sum(axis=0) / k2.sum(), dtype=a.dtype)
    c = a.shape[2]
    # the window is separable: one row pass then one column pass
    row = g.reshape(1, 1, 1, SSIM_WINDOW).expand(5 * c, 1, 1, SSIM_WINDOW)
    col = g.reshape(1, 1, SSIM_WINDOW, 1).expand(5 * c, 1, SSIM_WINDOW, 1)
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    stack = torch.cat([x, y, x * x, y * y, x * y]).unsqueeze(0)
    f = F.conv2d(F.conv2d(stack, row, groups=5 * c), col, groups=5 * c)[0]
    mx, my, fxx, fyy, fxy = f[:c], f[c : 2 * c], f[2 * c : 3 * c], f[3 * c : 4 * c], f[4 * c :]
    vx = fxx - mx * mx
    vy = fyy - my * my
    cxy = fxy - mx * my
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return smap.mean()
