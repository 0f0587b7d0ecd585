"""Mipmap pyramid over a background texture and differentiable sampling.

The texture is the image-based light source. A primitive looks it up with a
learned UV coordinate and a blur-level modifier in [0, 1]: 0 selects the
finest level, 1 the coarsest, with linear interpolation between the two
adjacent levels. Addressing is clamp-to-edge; uv (0, 0) is the center of the
top-left texel and (1, 1) the center of the bottom-right one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

DEFAULT_LEVELS = 8


@dataclass(frozen=True)
class UvSample:
    """One texture lookup: normalized uv in [0,1]^2 plus blur level in [0,1]."""
    uv: np.ndarray
    delta: float


def _box_downsample(img: np.ndarray) -> np.ndarray:
    """2x2 box filter with edge replication for odd sizes."""
    h, w = img.shape[:2]
    if h % 2:
        img = np.concatenate([img, img[-1:]], axis=0)
    if w % 2:
        img = np.concatenate([img, img[:, -1:]], axis=1)
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    return img.reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))


def _bilinear(img: np.ndarray, uv: np.ndarray, with_grad: bool):
    """Bilinear lookup of an (H, W, C) image at uv (M, 2), clamp-to-edge.

    Returns (values (M, C), grad (M, C, 2) or None). The gradient is w.r.t.
    the normalized uv coordinates (already scaled by level size - 1).
    """
    h, w = img.shape[:2]
    c = img.shape[2]
    u = np.clip(uv[:, 0], 0.0, 1.0)
    v = np.clip(uv[:, 1], 0.0, 1.0)
    x = u * (w - 1)
    y = v * (h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]

    c00 = img[y0, x0]
    c10 = img[y0, x1]
    c01 = img[y1, x0]
    c11 = img[y1, x1]
    top = c00 * (1 - fx) + c10 * fx
    bot = c01 * (1 - fx) + c11 * fx
    val = top * (1 - fy) + bot * fy
    if not with_grad:
        return val, None
    dval_dx = (c10 - c00) * (1 - fy) + (c11 - c01) * fy
    dval_dy = bot - top
    grad = np.empty((uv.shape[0], c, 2), dtype=np.float64)
    grad[..., 0] = dval_dx * (w - 1)
    grad[..., 1] = dval_dy * (h - 1)
    # Clamped coordinates contribute no gradient.
    grad[(uv[:, 0] < 0.0) | (uv[:, 0] > 1.0), :, 0] = 0.0
    grad[(uv[:, 1] < 0.0) | (uv[:, 1] > 1.0), :, 1] = 0.0
    return val, grad


class MipPyramid:
    """Background texture with progressively box-filtered levels.

    Level 0 is the original image; level n has dims ceil(H/2^n) x ceil(W/2^n).
    Immutable after construction; sampling is pure and thread-safe.
    """

    def __init__(self, levels, background_id: int = -1):
        self.levels = [np.ascontiguousarray(l, dtype=np.float64) for l in levels]
        self.background_id = background_id

    @classmethod
    def build(cls, image: np.ndarray, n_levels: int = DEFAULT_LEVELS,
              background_id: int = -1) -> "MipPyramid":
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[..., None].repeat(3, axis=2)
        h, w = image.shape[:2]
        if n_levels < 1:
            raise InvalidParameterError("need at least one pyramid level")
        if min(h, w) < 2 ** (n_levels - 1):
            raise InvalidParameterError(
                f"{n_levels} levels need an image of at least {2 ** (n_levels - 1)} px per side, got {h}x{w}")
        levels = [image]
        for _ in range(n_levels - 1):
            levels.append(_box_downsample(levels[-1]))
        return cls(levels, background_id)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def _level_blend(self, delta: np.ndarray):
        """Map delta in [0,1] to (lower level, fraction toward the next level)."""
        n = self.n_levels
        level = np.clip(delta, 0.0, 1.0) * (n - 1)
        lo = np.minimum(np.floor(level).astype(np.int64), max(n - 2, 0))
        return lo, level - lo

    def sample_bilinear(self, level: int, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(1, 2)
        val, _ = _bilinear(self.levels[level], uv, with_grad=False)
        return val[0]

    def sample_trilinear(self, sample: UvSample) -> np.ndarray:
        """Level-interpolated lookup; continuous in (uv, delta)."""
        uv = np.asarray(sample.uv, dtype=np.float64).reshape(1, 2)
        val, _, _ = self.sample_many(uv, np.array([sample.delta], dtype=np.float64))
        return val[0]

    def sample_gradients(self, sample: UvSample):
        """Analytic (d/duv (3,2), d/ddelta (3,)) of sample_trilinear."""
        uv = np.asarray(sample.uv, dtype=np.float64).reshape(1, 2)
        _, duv, ddelta = self.sample_many(uv, np.array([sample.delta], dtype=np.float64),
                                          with_grad=True)
        return duv[0], ddelta[0]

    def sample_many(self, uv: np.ndarray, delta: np.ndarray, with_grad: bool = False):
        """Vectorized trilinear sampling.

        uv: (M, 2), delta: (M,). Returns (values (M, 3), duv (M, 3, 2) | None,
        ddelta (M, 3) | None). Level indices are treated as constant within an
        interpolation cell, so the delta gradient flows through the blend
        fraction only.
        """
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        delta = np.asarray(delta, dtype=np.float64).reshape(-1)
        m = uv.shape[0]
        vals = np.zeros((m, 3), dtype=np.float64)
        duv = np.zeros((m, 3, 2), dtype=np.float64) if with_grad else None
        ddelta = np.zeros((m, 3), dtype=np.float64) if with_grad else None
        if m == 0:
            return vals, duv, ddelta

        lo, frac = self._level_blend(delta)
        if self.n_levels == 1:
            v, g = _bilinear(self.levels[0], uv, with_grad)
            vals[:] = v
            if with_grad:
                duv[:] = g
            return vals, duv, ddelta

        scale = self.n_levels - 1  # d(level)/d(delta)
        for level in np.unique(lo):
            sel = lo == level
            v0, g0 = _bilinear(self.levels[level], uv[sel], with_grad)
            v1, g1 = _bilinear(self.levels[level + 1], uv[sel], with_grad)
            a = frac[sel][:, None]
            vals[sel] = (1 - a) * v0 + a * v1
            if with_grad:
                duv[sel] = (1 - a[..., None]) * g0 + a[..., None] * g1
                ddelta[sel] = (v1 - v0) * scale
        if with_grad:
            # Outside [0,1] the level clamp kills the delta gradient.
            ddelta[(delta < 0.0) | (delta > 1.0)] = 0.0
        return vals, duv, ddelta
