"""Structural similarity with an analytic gradient.

11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, dynamic range 1.
Filtering uses zero padding so the adjoint of the window filter is the filter
itself, keeping the gradient exact.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _window() -> np.ndarray:
    half = (WINDOW - 1) / 2
    t = np.arange(WINDOW) - half
    k = np.exp(-0.5 * (t / SIGMA) ** 2)
    return k / k.sum()

_KERNEL = _window()


def _filt(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM averaged over channels. Returns an (H, W) map."""
    x = _as_channels(a)
    y = _as_channels(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mx = _filt(x)
    my = _filt(y)
    sxx = _filt(x * x) - mx * mx
    syy = _filt(y * y) - my * my
    sxy = _filt(x * y) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return (num / den).mean(axis=-1)


def ssim_mean_and_grad(a: np.ndarray, b: np.ndarray):
    """(mean SSIM, d(mean SSIM)/d(a)). Gradient matches finite differences."""
    x = _as_channels(a)
    y = _as_channels(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mx = _filt(x)
    my = _filt(y)
    x2f = _filt(x * x)
    xyf = _filt(x * y)
    sxx = x2f - mx * mx
    syy = _filt(y * y) - my * my
    sxy = xyf - mx * my
    a1 = 2 * mx * my + C1
    a2 = 2 * sxy + C2
    b1 = mx * mx + my * my + C1
    b2 = sxx + syy + C2
    inv_bb = 1.0 / (b1 * b2)
    s = a1 * a2 * inv_bb
    mean = float(s.mean())

    u = np.full_like(s, 1.0 / s.size)  # upstream d(mean)/dS
    ds_da2 = a1 * inv_bb
    ds_db2 = -s / b2
    # dS/dmx collects the dependencies through a1, b1, sxx, and sxy.
    ds_dmx = u * (2 * my * a2 * inv_bb - 2 * mx * s / b1
                  + ds_db2 * (-2 * mx) + 2 * ds_da2 * (-my))
    d_x2f = u * ds_db2
    d_xyf = u * 2 * ds_da2
    grad = _filt(ds_dmx) + 2 * x * _filt(d_x2f) + y * _filt(d_xyf)
    if np.asarray(a).ndim == 2:
        grad = grad[..., 0]
    return mean, grad
