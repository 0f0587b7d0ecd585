"""Tile-based forward splatting with relit-color composition and the
analytic backward pass.

Per-primitive colors are composed before compositing: the canonical color
(view-dependent SH) plus an intensity-scaled residual sampled from the
background mip pyramid at a learned, view-dependent UV and blur level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import numba

from . import _kernels
from .core_math import (COV2D_REG, Camera, eval_sh, project_gaussians,
                        quaternions_to_rotations, sh_basis, sh_basis_grad,
                        sigmoid)
from .errors import InvalidParameterError
from .mip import MipPyramid, UvSample
from .scene import SplatScene

TILE = _kernels.TILE
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


def set_threads(n: int) -> int:
    """Clamp the numba thread pool to n; returns the value actually set."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@dataclass
class RenderOutput:
    color: np.ndarray         # (H, W, 3) relit composite
    canonical: np.ndarray     # (H, W, 3) fixed-lighting colors only
    alpha: np.ndarray         # (H, W) accumulated opacity
    depth: np.ndarray         # (H, W) alpha-weighted mean camera z
    lambda_map: np.ndarray    # (H, W) accumulated light intensity
    residual_map: np.ndarray  # (H, W, 3) accumulated intensity-scaled residual


@dataclass
class SortedSplatList:
    """Per-tile depth-ascending contribution lists (flattened)."""
    tile_starts: np.ndarray   # (n_tiles + 1,) offsets into entries
    entries: np.ndarray       # (E,) primitive indices
    depths: np.ndarray        # (E,) matching depth keys
    tiles_x: int
    tiles_y: int


@dataclass
class SceneGrads:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_sh: np.ndarray
    intensity_sh: np.ndarray
    uv_sh: np.ndarray
    mip_delta_raw: np.ndarray

    @classmethod
    def zeros_like(cls, scene: SplatScene) -> "SceneGrads":
        return cls(**{k: np.zeros_like(v) for k, v in scene.param_arrays().items()})

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BackwardAux:
    """Per-primitive statistics used by adaptive density control."""
    mean2d_grad_norm: np.ndarray  # (M,) viewport-normalized positional gradient
    visible: np.ndarray           # (M,) contributed to at least one tile


def splat_weight(pixel, center2d, cov2d) -> float:
    """Gaussian falloff exp(-0.5 * d^T cov2d^-1 d) of a pixel about a splat center."""
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(center2d, dtype=np.float64)
    cov2d = np.asarray(cov2d, dtype=np.float64)
    det = cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0]
    if det <= 0:
        raise InvalidParameterError("2D covariance must be positive definite")
    inv = np.array([[cov2d[1, 1], -cov2d[0, 1]], [-cov2d[1, 0], cov2d[0, 0]]]) / det
    return float(np.exp(-0.5 * d @ inv @ d))


def compose_color(scene: SplatScene, index: int, direction,
                  pyramid: MipPyramid | None, lambda_scale: float = 1.0) -> np.ndarray:
    """Relit color of one primitive: canonical SH color plus intensity-scaled
    residual sampled from the background pyramid."""
    d = np.asarray(direction, dtype=np.float64)
    ctilde = eval_sh(scene.color_sh[index], d)
    if pyramid is None:
        return ctilde
    lam = float(eval_sh(scene.intensity_sh[index], d)[0]) * lambda_scale
    uv = eval_sh(scene.uv_sh[index], d)
    delta = float(sigmoid(scene.mip_delta_raw[index]))
    dc = pyramid.sample_trilinear(UvSample(np.clip(uv, 0.0, 1.0), delta))
    return ctilde + lam * dc


class _Geometry:
    """View-dependent per-primitive state reusable across shading changes."""

    __slots__ = ("camera", "xc", "depth", "visible", "mean2d", "cov2d", "conic",
                 "jw", "dirs", "dist", "basis", "basis_jac", "rot3", "splat_list")

    def __init__(self, scene: SplatScene, camera: Camera, with_basis_jac: bool):
        self.camera = camera
        scales = scene.scales
        quats = scene.rotations
        self.rot3 = quaternions_to_rotations(quats)
        ms = self.rot3 * scales[:, None, :]
        cov3 = ms @ np.swapaxes(ms, 1, 2)
        self.mean2d, self.cov2d, self.depth, self.visible = project_gaussians(
            scene.positions, cov3, camera)
        self.xc = camera.world_to_cam(scene.positions)

        a = self.cov2d[:, 0, 0]
        b = self.cov2d[:, 0, 1]
        c = self.cov2d[:, 1, 1]
        det = a * c - b * b
        det = np.where(det > 1e-12, det, 1e-12)
        self.conic = np.stack([c / det, -b / det, a / det], axis=1)

        v = scene.positions - camera.center
        self.dist = np.linalg.norm(v, axis=1)
        safe = np.where(self.dist > 1e-12, self.dist, 1.0)
        self.dirs = v / safe[:, None]
        self.basis = sh_basis(self.dirs)
        self.basis_jac = sh_basis_grad(self.dirs) if with_basis_jac else None

        zs = np.where(self.visible, self.xc[:, 2], 1.0)
        jw = np.zeros((scene.m, 2, 3), dtype=np.float64)
        inv_z = 1.0 / zs
        jw[:, 0, 0] = camera.fx * inv_z
        jw[:, 0, 2] = -camera.fx * self.xc[:, 0] * inv_z * inv_z
        jw[:, 1, 1] = camera.fy * inv_z
        jw[:, 1, 2] = -camera.fy * self.xc[:, 1] * inv_z * inv_z
        self.jw = jw @ camera.rotation

        mid = 0.5 * (a + c)
        disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = np.ceil(3.0 * np.sqrt(np.maximum(mid + disc, 0.0)))
        self.splat_list = _build_splat_list(
            self.mean2d, self.depth, radius, self.visible, camera.width, camera.height)


class _Shading:
    """Per-primitive composed colors and the sample gradients for backprop."""

    __slots__ = ("ctilde", "lam_eval", "lam", "uv_raw", "delta", "dc",
                 "dc_duv", "dc_ddelta", "resid", "comp", "lambda_scale")

    def __init__(self, scene: SplatScene, geom: _Geometry,
                 pyramid: MipPyramid | None, lambda_scale: float, with_grad: bool):
        basis = geom.basis
        self.lambda_scale = lambda_scale
        self.ctilde = np.einsum("mk,mkc->mc", basis, scene.color_sh)
        m = scene.m
        if pyramid is None:
            self.lam_eval = np.zeros(m)
            self.lam = np.zeros(m)
            self.uv_raw = np.full((m, 2), 0.5)
            self.delta = sigmoid(scene.mip_delta_raw)
            self.dc = np.zeros((m, 3))
            self.dc_duv = np.zeros((m, 3, 2)) if with_grad else None
            self.dc_ddelta = np.zeros((m, 3)) if with_grad else None
        else:
            self.lam_eval = np.einsum("mk,mkc->mc", basis, scene.intensity_sh)[:, 0]
            self.lam = self.lam_eval * lambda_scale
            self.uv_raw = np.einsum("mk,mkc->mc", basis, scene.uv_sh)
            self.delta = sigmoid(scene.mip_delta_raw)
            self.dc, self.dc_duv, self.dc_ddelta = pyramid.sample_many(
                self.uv_raw, self.delta, with_grad=with_grad)
        self.resid = self.lam[:, None] * self.dc
        self.comp = self.ctilde + self.resid


def _build_splat_list(mean2d, depth, radius, visible, width, height) -> SortedSplatList:
    tiles_x = (width + TILE - 1) // TILE
    tiles_y = (height + TILE - 1) // TILE
    u, v = mean2d[:, 0], mean2d[:, 1]
    lo_x = np.maximum(np.floor((u - radius) / TILE).astype(np.int64), 0)
    hi_x = np.minimum(np.floor((u + radius) / TILE).astype(np.int64), tiles_x - 1)
    lo_y = np.maximum(np.floor((v - radius) / TILE).astype(np.int64), 0)
    hi_y = np.minimum(np.floor((v + radius) / TILE).astype(np.int64), tiles_y - 1)
    nx = hi_x - lo_x + 1
    ny = hi_y - lo_y + 1
    counts = np.where(visible & (nx > 0) & (ny > 0) & (radius > 0), nx * ny, 0)

    total = int(counts.sum())
    if total == 0:
        return SortedSplatList(np.zeros(tiles_x * tiles_y + 1, dtype=np.int64),
                               np.zeros(0, dtype=np.int64), np.zeros(0),
                               tiles_x, tiles_y)
    gauss = np.repeat(np.arange(mean2d.shape[0], dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    nx_rep = np.repeat(nx, counts)
    tile_id = ((np.repeat(lo_y, counts) + local // nx_rep) * tiles_x
               + np.repeat(lo_x, counts) + local % nx_rep)

    order = np.lexsort((gauss, depth[gauss], tile_id))
    entries = gauss[order]
    tile_sorted = tile_id[order]
    tile_starts = np.searchsorted(tile_sorted, np.arange(tiles_x * tiles_y + 1))
    return SortedSplatList(tile_starts.astype(np.int64), entries,
                           depth[entries].copy(), tiles_x, tiles_y)


def render(scene: SplatScene, camera: Camera, pyramid: MipPyramid | None = None,
           alpha_threshold: float = ALPHA_MIN, *, lambda_scale: float = 1.0,
           _geom: "_Geometry | None" = None) -> RenderOutput:
    """Front-to-back alpha compositing of the scene into all output buffers.

    With no pyramid the residual path is disabled and color equals the
    canonical buffer. Deterministic for fixed inputs and any thread count.
    """
    geom = _geom if _geom is not None else _Geometry(scene, camera, with_basis_jac=False)
    shade = _Shading(scene, geom, pyramid, lambda_scale, with_grad=False)
    return _run_forward(geom, shade, sigmoid(scene.opacity_logits), camera, alpha_threshold)


def _run_forward(geom: _Geometry, shade: _Shading, opac: np.ndarray, camera: Camera,
                 alpha_threshold: float) -> RenderOutput:
    h, w = camera.height, camera.width
    out = RenderOutput(color=np.zeros((h, w, 3)), canonical=np.zeros((h, w, 3)),
                       alpha=np.zeros((h, w)), depth=np.zeros((h, w)),
                       lambda_map=np.zeros((h, w)), residual_map=np.zeros((h, w, 3)))
    lst = geom.splat_list
    _kernels.forward_kernel(h, w, lst.tile_starts, lst.entries,
                            geom.mean2d, geom.conic, opac,
                            shade.comp, shade.ctilde, shade.lam, shade.resid,
                            geom.depth, alpha_threshold, T_MIN,
                            out.color, out.canonical, out.alpha, out.depth,
                            out.lambda_map, out.residual_map)
    np.divide(out.depth, out.alpha, out=out.depth, where=out.alpha > 1e-12)
    out.depth[out.alpha <= 1e-12] = 0.0
    return out


def render_backward(scene: SplatScene, camera: Camera, pyramid: MipPyramid | None,
                    grad_color: np.ndarray, grad_alpha: np.ndarray,
                    alpha_threshold: float = ALPHA_MIN, *, lambda_scale: float = 1.0,
                    grad_canonical: np.ndarray | None = None
                    ) -> tuple[SceneGrads, BackwardAux]:
    """Analytic gradients of a scalar loss given its derivatives w.r.t. the
    color and alpha buffers (optionally also the canonical buffer). Matches
    central finite differences of the forward render."""
    geom = _Geometry(scene, camera, with_basis_jac=True)
    shade = _Shading(scene, geom, pyramid, lambda_scale, with_grad=True)
    opac = sigmoid(scene.opacity_logits)
    lst = geom.splat_list
    n_entries = lst.entries.shape[0]
    g_color_e = np.zeros((n_entries, 3))
    g_canon_e = np.zeros((n_entries, 3))
    g_mean2d_e = np.zeros((n_entries, 2))
    g_conic_e = np.zeros((n_entries, 3))
    g_opac_e = np.zeros(n_entries)
    if grad_canonical is None:
        grad_canonical = np.zeros((camera.height, camera.width, 3))
    _kernels.backward_kernel(camera.height, camera.width, lst.tile_starts, lst.entries,
                             geom.mean2d, geom.conic, opac, shade.comp, shade.ctilde,
                             alpha_threshold, T_MIN,
                             np.ascontiguousarray(grad_color, dtype=np.float64),
                             np.ascontiguousarray(grad_alpha, dtype=np.float64),
                             np.ascontiguousarray(grad_canonical, dtype=np.float64),
                             g_color_e, g_mean2d_e, g_conic_e, g_opac_e, g_canon_e)

    m = scene.m
    g_comp = np.zeros((m, 3))
    g_canon = np.zeros((m, 3))
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_opac = np.zeros(m)
    np.add.at(g_comp, lst.entries, g_color_e)
    np.add.at(g_canon, lst.entries, g_canon_e)
    np.add.at(g_mean2d, lst.entries, g_mean2d_e)
    np.add.at(g_conic, lst.entries, g_conic_e)
    np.add.at(g_opac, lst.entries, g_opac_e)

    grads = _chain_rule(scene, geom, shade, camera, opac,
                        g_comp, g_canon, g_mean2d, g_conic, g_opac)
    visible = np.zeros(m, dtype=bool)
    visible[lst.entries] = True
    norm = np.linalg.norm(g_mean2d, axis=1) * (0.5 * max(camera.width, camera.height))
    return grads, BackwardAux(mean2d_grad_norm=norm, visible=visible)


def _chain_rule(scene, geom: _Geometry, shade: _Shading, camera: Camera, opac,
                g_comp, g_canon, g_mean2d, g_conic, g_opac) -> SceneGrads:
    m = scene.m
    basis = geom.basis
    basis_jac = geom.basis_jac

    # Composed color -> canonical SH / intensity / uv / blur level.
    g_ctilde = g_comp + g_canon
    g_lam = np.einsum("mc,mc->m", g_comp, shade.dc)
    g_dc = g_comp * shade.lam[:, None]
    g_uv_eval = np.einsum("mc,mcu->mu", g_dc, shade.dc_duv)
    g_delta = np.einsum("mc,mc->m", g_dc, shade.dc_ddelta)
    g_delta_raw = g_delta * shade.delta * (1.0 - shade.delta)
    g_lam_eval = g_lam * shade.lambda_scale

    g_color_sh = basis[:, :, None] * g_ctilde[:, None, :]
    g_intensity_sh = (basis * g_lam_eval[:, None])[..., None]
    g_uv_sh = basis[:, :, None] * g_uv_eval[:, None, :]

    # View-direction dependence of every SH evaluation.
    g_dir = np.einsum("mc,mkc,mkj->mj", g_ctilde, scene.color_sh, basis_jac)
    g_dir += np.einsum("m,mk,mkj->mj", g_lam_eval, scene.intensity_sh[:, :, 0], basis_jac)
    g_dir += np.einsum("mu,mku,mkj->mj", g_uv_eval, scene.uv_sh, basis_jac)
    dot = np.einsum("mj,mj->m", g_dir, geom.dirs)
    dist = np.where(geom.dist > 1e-12, geom.dist, 1.0)
    g_pos = (g_dir - dot[:, None] * geom.dirs) / dist[:, None]

    # Conic -> 2D covariance (inverse-matrix chain).
    gf = np.empty((m, 2, 2))
    gf[:, 0, 0] = g_conic[:, 0]
    gf[:, 0, 1] = gf[:, 1, 0] = 0.5 * g_conic[:, 1]
    gf[:, 1, 1] = g_conic[:, 2]
    a = geom.cov2d[:, 0, 0]
    b = geom.cov2d[:, 0, 1]
    c = geom.cov2d[:, 1, 1]
    det = np.where(a * c - b * b > 1e-12, a * c - b * b, 1e-12)
    inv = np.empty((m, 2, 2))
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    g_cov2d = -inv @ gf @ inv

    # cov2d = Jw Sigma3 Jw^T (+ reg); Sigma3 = (R s)(R s)^T.
    g_cov2d = 0.5 * (g_cov2d + np.swapaxes(g_cov2d, 1, 2))
    jw = geom.jw
    scales = scene.scales
    ms = geom.rot3 * scales[:, None, :]
    cov3 = ms @ np.swapaxes(ms, 1, 2)
    g_cov3 = np.swapaxes(jw, 1, 2) @ g_cov2d @ jw
    g_jw = 2.0 * (g_cov2d @ jw @ cov3)
    g_ms = 2.0 * (g_cov3 @ ms)
    g_scales = np.einsum("mak,mak->mk", geom.rot3, g_ms)
    g_log_scales = g_scales * scales
    g_rot3 = g_ms * scales[:, None, :]
    g_quat = _rotation_to_quaternion_grad(scene.rotations, g_rot3)

    # Projection Jacobian and 2D mean depend on the camera-space position.
    g_j = g_jw @ camera.rotation.T
    xc = geom.xc
    zs = np.where(geom.visible, xc[:, 2], 1.0)
    inv_z = 1.0 / zs
    inv_z2 = inv_z * inv_z
    g_xcam = np.zeros((m, 3))
    g_xcam[:, 0] += g_j[:, 0, 2] * (-camera.fx * inv_z2)
    g_xcam[:, 1] += g_j[:, 1, 2] * (-camera.fy * inv_z2)
    g_xcam[:, 2] += (g_j[:, 0, 0] * (-camera.fx * inv_z2)
                     + g_j[:, 0, 2] * (2.0 * camera.fx * xc[:, 0] * inv_z2 * inv_z)
                     + g_j[:, 1, 1] * (-camera.fy * inv_z2)
                     + g_j[:, 1, 2] * (2.0 * camera.fy * xc[:, 1] * inv_z2 * inv_z))
    g_xcam[:, 0] += g_mean2d[:, 0] * camera.fx * inv_z
    g_xcam[:, 1] += g_mean2d[:, 1] * camera.fy * inv_z
    g_xcam[:, 2] += (-g_mean2d[:, 0] * camera.fx * xc[:, 0] * inv_z2
                     - g_mean2d[:, 1] * camera.fy * xc[:, 1] * inv_z2)
    g_pos += g_xcam @ camera.rotation

    g_logits = g_opac * opac * (1.0 - opac)

    return SceneGrads(positions=g_pos, log_scales=g_log_scales, rotations=g_quat,
                      opacity_logits=g_logits, color_sh=g_color_sh,
                      intensity_sh=g_intensity_sh, uv_sh=g_uv_sh,
                      mip_delta_raw=g_delta_raw)


def _rotation_to_quaternion_grad(raw_quats: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR back to raw (unnormalized) quaternions."""
    norms = np.linalg.norm(raw_quats, axis=1, keepdims=True)
    q = raw_quats / norms
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = q.shape[0]
    zero = np.zeros(m)
    # dR/d(component) for the unit quaternion, each (M, 3, 3).
    dw = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=1),
        np.stack([z, zero, -x], axis=1),
        np.stack([-y, x, zero], axis=1)], axis=1)
    dx = 2.0 * np.stack([
        np.stack([zero, y, z], axis=1),
        np.stack([y, -2 * x, -w], axis=1),
        np.stack([z, w, -2 * x], axis=1)], axis=1)
    dy = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=1),
        np.stack([x, zero, z], axis=1),
        np.stack([-w, z, -2 * y], axis=1)], axis=1)
    dz = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=1),
        np.stack([w, -2 * z, y], axis=1),
        np.stack([x, y, zero], axis=1)], axis=1)
    g_unit = np.stack([np.einsum("mab,mab->m", g_rot, d) for d in (dw, dx, dy, dz)],
                      axis=1)
    dot = np.einsum("mj,mj->m", g_unit, q)
    return (g_unit - dot[:, None] * q) / norms


def geometry_cache(scene: SplatScene, camera: Camera) -> "_Geometry":
    """Precompute projection/sorting state for repeated shading-only renders."""
    return _Geometry(scene, camera, with_basis_jac=False)
