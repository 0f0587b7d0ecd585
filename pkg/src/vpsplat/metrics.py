"""Evaluation metrics: PSNR on RGB / luma / chroma channels and SSIM,
restricted to mask-covered pixels."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import InvalidParameterError
from .ssim import ssim_map

PSNR_MODES = ("RGB", "Y", "CrCb")


def rgb_to_ycrcb(img: np.ndarray) -> np.ndarray:
    """Full-range BT.601 conversion of an (.., 3) RGB image in [0, 1]."""
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cr = (r - y) * 0.713 + 0.5
    cb = (b - y) * 0.564 + 0.5
    return np.stack([y, cr, cb], axis=-1)


def psnr(a: np.ndarray, b: np.ndarray, mode: str = "RGB",
         mask: np.ndarray | None = None) -> float:
    """10*log10(1/MSE) over masked pixels after the selected color transform.

    Returns +inf for identical images. Inputs are clamped to [0, 1] first.
    """
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mode not in PSNR_MODES:
        raise InvalidParameterError(f"unknown PSNR mode {mode!r}")
    if mode != "RGB":
        ya = rgb_to_ycrcb(a)
        yb = rgb_to_ycrcb(b)
        if mode == "Y":
            a, b = ya[..., 0], yb[..., 0]
        else:
            a, b = ya[..., 1:], yb[..., 1:]
    if mask is None:
        sel_a, sel_b = a, b
    else:
        mask = np.asarray(mask) > 0
        if not mask.any():
            raise InvalidParameterError("empty mask")
        sel_a, sel_b = a[mask], b[mask]
    mse = float(np.mean((sel_a - sel_b) ** 2))
    if mse <= 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean local SSIM over windows whose center pixel is masked-in."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    smap = ssim_map(a, b)
    if mask is None:
        return float(smap.mean())
    mask = np.asarray(mask) > 0
    if not mask.any():
        raise InvalidParameterError("empty mask")
    return float(smap[mask].mean())


def write_report(rows, path) -> None:
    """Write evaluation rows (scene, j, k, metric, value) as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "j", "k", "metric", "value"])
        for row in rows:
            writer.writerow(list(row))
