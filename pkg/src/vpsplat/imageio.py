"""PNG import/export helpers.

All in-memory images are float64 in [0, 1] (HxW or HxWx3). Background
textures are kept in their stored domain: no gamma decode is applied.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


def save_png(image: np.ndarray, path) -> None:
    """Clamp to [0, 1] and write an 8-bit grayscale or RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(Path(path))


def load_image(path) -> np.ndarray:
    """8-bit PNG/JPEG to float64 in [0, 1]; RGB(A) collapses to RGB."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    """8-bit grayscale mask thresholded at 128 into a {0, 1} uint8 array."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"mask not found: {path}")
    img = Image.open(path).convert("L")
    return (np.asarray(img) >= 128).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)).save(Path(path))


def save_png16(values: np.ndarray, path, sidecar: dict | None = None) -> None:
    """Scalar buffer to 16-bit grayscale PNG, scale recorded in a JSON sidecar.

    stored = round(value / scale * 65535); scale = max(value) or 1 for an
    all-zero buffer.
    """
    values = np.asarray(values, dtype=np.float64)
    scale = float(values.max()) if values.size and values.max() > 0 else 1.0
    data = np.rint(np.clip(values / scale, 0.0, 1.0) * 65535.0).astype(np.uint16)
    path = Path(path)
    Image.fromarray(data, mode="I;16").save(path)
    meta = {"scale": scale, "offset": 0.0, "encoding": "value = stored / 65535 * scale"}
    if sidecar:
        meta.update(sidecar)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def load_png16(path) -> np.ndarray:
    path = Path(path)
    data = np.asarray(Image.open(path), dtype=np.float64) / 65535.0
    meta_path = path.with_suffix(path.suffix + ".json")
    scale = 1.0
    if meta_path.exists():
        scale = float(json.loads(meta_path.read_text()).get("scale", 1.0))
    return data * scale
