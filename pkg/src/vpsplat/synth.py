"""Synthetic miniature stage: objects in front of an emissive textured plane,
captured by a ring of fixed cameras under swappable backgrounds.

Lighting is one-bounce: direct view of the plane, plus single
reflection/refraction/diffuse-gather paths toward it. All texture-dependent
transport is collected as (uv, weight) gather samples per pixel, which makes
every rendered frame exactly linear in the emission image, so one geometry
trace per view serves every background.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import Camera
from .dataset import DatasetManifest, FrameRecord
from .errors import InvalidParameterError
from .imageio import save_mask, save_png
from .mip import _bilinear


@dataclass
class Material:
    albedo: tuple = (0.7, 0.7, 0.7)
    mirror: float = 0.0
    transmission: float = 0.0
    ior: float = 1.45

    @property
    def diffuse(self) -> float:
        return max(0.0, 1.0 - self.mirror - self.transmission)


@dataclass
class Sphere:
    center: tuple
    radius: float
    material: Material


@dataclass
class Box:
    bmin: tuple
    bmax: tuple
    material: Material


@dataclass
class Rect:
    """Finite one-sided rectangle origin + u*eu + v*ev, u,v in [0,1]."""
    origin: tuple
    eu: tuple
    ev: tuple
    material: Material


@dataclass
class EmissivePlane:
    """Vertical LED panel; uv (0,0) is the texture's top-left corner."""
    center: tuple = (0.0, 1.4, 0.8)
    width: float = 3.4
    height: float = 2.0

    @property
    def origin(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        return c + np.array([-self.width / 2, 0.0, self.height / 2])

    @property
    def eu(self) -> np.ndarray:
        return np.array([self.width, 0.0, 0.0])

    @property
    def ev(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.height])

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.ev, self.eu)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass
class StageScene:
    objects: list = field(default_factory=list)
    plane: EmissivePlane = field(default_factory=EmissivePlane)
    cameras: list = field(default_factory=list)
    ambient: tuple = (0.06, 0.06, 0.07)
    sun_dir: tuple = (-0.35, 0.5, -0.79)    # travel direction of the fixed key light
    sun_color: tuple = (0.85, 0.82, 0.78)
    plane_off: float = 0.02                 # panel radiance with the texture off

    def object_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = [], []
        for obj in self.objects:
            if isinstance(obj, Sphere):
                c = np.asarray(obj.center)
                los.append(c - obj.radius)
                his.append(c + obj.radius)
            elif isinstance(obj, Box):
                los.append(np.asarray(obj.bmin, dtype=np.float64))
                his.append(np.asarray(obj.bmax, dtype=np.float64))
            elif isinstance(obj, Rect):
                o = np.asarray(obj.origin, dtype=np.float64)
                corners = np.stack([o, o + obj.eu, o + obj.ev,
                                    o + np.asarray(obj.eu) + np.asarray(obj.ev)])
                los.append(corners.min(0))
                his.append(corners.max(0))
        return np.min(los, axis=0), np.max(his, axis=0)


# ---------------------------------------------------------------------------
# intersection helpers (vectorized over rays)

_INF = np.inf
_EPS = 1e-9


def _ray_sphere(o, d, center, radius):
    oc = o - np.asarray(center, dtype=np.float64)
    b = np.einsum("nj,nj->n", oc, d)
    c = np.einsum("nj,nj->n", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, _INF))
    return np.where(hit, t, _INF)


def _ray_box(o, d, bmin, bmax):
    bmin = np.asarray(bmin, dtype=np.float64)
    bmax = np.asarray(bmax, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (bmin - o) * inv
        t1 = (bmax - o) * inv
    tlo = np.nanmin(np.stack([t0, t1]), axis=0).max(axis=1)
    thi = np.nanmax(np.stack([t0, t1]), axis=0).min(axis=1)
    hit = (thi > _EPS) & (tlo <= thi)
    t = np.where(tlo > _EPS, tlo, thi)
    return np.where(hit, t, _INF)


def _ray_rect(o, d, origin, eu, ev):
    """Returns (t, u, v); misses get t = inf."""
    origin = np.asarray(origin, dtype=np.float64)
    eu = np.asarray(eu, dtype=np.float64)
    ev = np.asarray(ev, dtype=np.float64)
    n = np.cross(eu, ev)
    denom = d @ n
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    t = ((origin - o) @ n) / safe
    p = o + t[:, None] * d
    rel = p - origin
    uu = eu @ eu
    vv = ev @ ev
    u = (rel @ eu) / uu
    v = (rel @ ev) / vv
    ok = (np.abs(denom) > 1e-12) & (t > _EPS) & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    return np.where(ok, t, _INF), u, v


def _sphere_normal(p, center):
    n = p - np.asarray(center, dtype=np.float64)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def _box_normal(p, bmin, bmax):
    bmin = np.asarray(bmin, dtype=np.float64)
    bmax = np.asarray(bmax, dtype=np.float64)
    center = 0.5 * (bmin + bmax)
    half = 0.5 * (bmax - bmin)
    rel = (p - center) / half
    axis = np.argmax(np.abs(rel), axis=1)
    n = np.zeros_like(p)
    n[np.arange(p.shape[0]), axis] = np.sign(rel[np.arange(p.shape[0]), axis])
    return n


def _rect_normal(obj: Rect, count: int) -> np.ndarray:
    n = np.cross(np.asarray(obj.eu, dtype=np.float64), np.asarray(obj.ev, dtype=np.float64))
    n = n / np.linalg.norm(n)
    return np.broadcast_to(n, (count, 3)).copy()


def _reflect(d, n):
    return d - 2.0 * np.einsum("nj,nj->n", d, n)[:, None] * n


def _refract(d, n, eta):
    """Snell refraction; total internal reflection falls back to reflection."""
    cosi = -np.einsum("nj,nj->n", d, n)
    k = 1.0 - eta * eta * (1.0 - cosi * cosi)
    tir = k < 0.0
    ksafe = np.sqrt(np.maximum(k, 0.0))
    out = eta * d + (eta * cosi - ksafe)[:, None] * n
    out[tir] = _reflect(d[tir], n[tir])
    return out


class _Tracer:
    def __init__(self, stage: StageScene):
        self.stage = stage

    def intersect_objects(self, o, d):
        """Nearest object hit: (t, index) with index -1 for misses."""
        n = o.shape[0]
        best_t = np.full(n, _INF)
        best_i = np.full(n, -1, dtype=np.int64)
        for i, obj in enumerate(self.stage.objects):
            if isinstance(obj, Sphere):
                t = _ray_sphere(o, d, obj.center, obj.radius)
            elif isinstance(obj, Box):
                t = _ray_box(o, d, obj.bmin, obj.bmax)
            else:
                t, _, _ = _ray_rect(o, d, obj.origin, obj.eu, obj.ev)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_i[closer] = i
        return best_t, best_i

    def blocked(self, o, d, tmax):
        """True where any object lies strictly between o and o + tmax*d."""
        hit = np.zeros(o.shape[0], dtype=bool)
        for obj in self.stage.objects:
            if isinstance(obj, Sphere):
                t = _ray_sphere(o, d, obj.center, obj.radius)
            elif isinstance(obj, Box):
                t = _ray_box(o, d, obj.bmin, obj.bmax)
            else:
                t, _, _ = _ray_rect(o, d, obj.origin, obj.eu, obj.ev)
            hit |= t < tmax - 1e-6
        return hit

    def normals(self, p, idx):
        n = np.zeros_like(p)
        for i, obj in enumerate(self.stage.objects):
            sel = idx == i
            if not sel.any():
                continue
            if isinstance(obj, Sphere):
                n[sel] = _sphere_normal(p[sel], obj.center)
            elif isinstance(obj, Box):
                n[sel] = _box_normal(p[sel], obj.bmin, obj.bmax)
            else:
                n[sel] = _rect_normal(obj, int(sel.sum()))
        return n

    def shade_fixed(self, p, n, idx):
        """Ambient + key-light shading (texture-independent) per hit point."""
        stage = self.stage
        out = np.zeros_like(p)
        sun = -np.asarray(stage.sun_dir, dtype=np.float64)
        sun = sun / np.linalg.norm(sun)
        ndl = np.maximum(np.einsum("nj,j->n", n, sun), 0.0)
        lit = ~self.blocked(p + n * 1e-6, np.broadcast_to(sun, p.shape).copy(), np.full(p.shape[0], _INF))
        for i, obj in enumerate(self.stage.objects):
            sel = idx == i
            if not sel.any():
                continue
            albedo = np.asarray(obj.material.albedo, dtype=np.float64)
            term = np.asarray(stage.ambient, dtype=np.float64)[None, :] \
                + np.asarray(stage.sun_color)[None, :] * (ndl[sel] * lit[sel])[:, None]
            out[sel] = obj.material.diffuse * albedo[None, :] * term
        return out


@dataclass
class TraceView:
    """Texture-independent trace of one camera: fixed shading plus per-pixel
    gather samples that are linear in the panel emission."""
    base: np.ndarray        # (H, W, 3) fixed lighting, panel contribution excluded
    mask: np.ndarray        # (H, W) uint8, 1 = foreground object
    gather_uv: np.ndarray   # (H, W, S, 2) float32 panel sample positions
    gather_w: np.ndarray    # (H, W, S, 3) float32 per-channel weights
    plane_off: float

    def evaluate(self, texture: np.ndarray | None) -> np.ndarray:
        """Final frame for a given panel texture (None = panel off)."""
        h, w, s, _ = self.gather_uv.shape
        img = self.base + self.plane_off * self.gather_w.sum(axis=2)
        if texture is not None:
            uv = self.gather_uv.reshape(-1, 2).astype(np.float64)
            vals, _ = _bilinear(np.asarray(texture, dtype=np.float64), uv, False)
            img = img + (self.gather_w.reshape(-1, 3) * vals).reshape(h, w, s, 3).sum(axis=2)
        return img


def trace_view(stage: StageScene, camera: Camera, spp: int, seed: int = 0) -> TraceView:
    """Trace one camera's geometry and light-transport samples."""
    if spp < 1:
        raise InvalidParameterError("spp must be >= 1")
    rng = np.random.default_rng((seed, camera.cam_id, 0xB17))
    tracer = _Tracer(stage)
    plane = stage.plane
    h, w = camera.height, camera.width
    npix = h * w

    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(px.ravel() - camera.cx) / camera.fx,
                         (py.ravel() - camera.cy) / camera.fy,
                         np.ones(npix)], axis=1)
    d = dirs_cam @ camera.rotation   # camera-to-world rotation applied row-wise
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, (npix, 3)).copy()

    t_obj, idx = tracer.intersect_objects(o, d)
    t_pl, u_pl, v_pl = _ray_rect(o, d, plane.origin, plane.eu, plane.ev)
    hit_plane = t_pl < t_obj
    hit_obj = (idx >= 0) & ~hit_plane

    base = np.zeros((npix, 3))
    n_slots = spp + 2
    g_uv = np.zeros((npix, n_slots, 2), dtype=np.float32)
    g_w = np.zeros((npix, n_slots, 3), dtype=np.float32)

    # Panel seen directly: unit gather weight at the hit uv.
    sel = np.where(hit_plane)[0]
    g_uv[sel, 0, 0] = u_pl[sel]
    g_uv[sel, 0, 1] = v_pl[sel]
    g_w[sel, 0, :] = 1.0

    obj_sel = np.where(hit_obj)[0]
    if obj_sel.size:
        p = o[obj_sel] + t_obj[obj_sel, None] * d[obj_sel]
        n = tracer.normals(p, idx[obj_sel])
        facing = np.einsum("nj,nj->n", n, d[obj_sel]) > 0
        n[facing] = -n[facing]
        base[obj_sel] = tracer.shade_fixed(p + n * 1e-6, n, idx[obj_sel])

        _diffuse_gather(stage, tracer, obj_sel, p, n, idx[obj_sel], spp, rng, g_uv, g_w)
        _specular_gather(stage, tracer, obj_sel, p, n, d[obj_sel], idx[obj_sel],
                         base, g_uv, g_w, slot=spp, kind="mirror")
        _transmit_gather(stage, tracer, obj_sel, p, n, d[obj_sel], idx[obj_sel],
                         base, g_uv, g_w, slot=spp + 1)

    return TraceView(base=base.reshape(h, w, 3),
                     mask=hit_obj.reshape(h, w).astype(np.uint8),
                     gather_uv=g_uv.reshape(h, w, n_slots, 2),
                     gather_w=g_w.reshape(h, w, n_slots, 3),
                     plane_off=stage.plane_off)


def _diffuse_gather(stage, tracer, sel, p, n, idx, spp, rng, g_uv, g_w):
    plane = stage.plane
    diffuse_w = np.zeros(sel.size)
    albedo = np.zeros((sel.size, 3))
    for i, obj in enumerate(stage.objects):
        m = idx == i
        diffuse_w[m] = obj.material.diffuse
        albedo[m] = obj.material.albedo
    active = diffuse_w > 0
    if not active.any():
        return
    rows = np.where(active)[0]
    k = rows.size
    uv = rng.random((k, spp, 2))
    q = (plane.origin[None, None, :] + uv[..., 0:1] * plane.eu[None, None, :]
         + uv[..., 1:2] * plane.ev[None, None, :])
    delta = q - p[rows][:, None, :]
    r2 = np.einsum("ksj,ksj->ks", delta, delta)
    dist = np.sqrt(r2)
    dl = delta / dist[..., None]
    cos_i = np.maximum(np.einsum("ksj,kj->ks", dl, n[rows]), 0.0)
    cos_l = np.maximum(np.einsum("ksj,j->ks", -dl, plane.normal), 0.0)
    orig = np.repeat(p[rows] + n[rows] * 1e-6, spp, axis=0)
    blocked = tracer.blocked(orig, dl.reshape(-1, 3), dist.reshape(-1)).reshape(k, spp)
    geo = cos_i * cos_l / np.maximum(r2, 1e-9) * (plane.area / spp) / np.pi
    geo[blocked] = 0.0
    weights = (diffuse_w[rows, None] * geo)[..., None] * albedo[rows][:, None, :]
    g_uv[sel[rows], :spp] = uv.astype(np.float32)
    g_w[sel[rows], :spp] = weights.astype(np.float32)


def _specular_gather(stage, tracer, sel, p, n, d, idx, base, g_uv, g_w, slot, kind):
    weight = np.zeros(sel.size)
    for i, obj in enumerate(stage.objects):
        weight[idx == i] = obj.material.mirror
    active = weight > 0
    if not active.any():
        return
    rows = np.where(active)[0]
    refl = _reflect(d[rows], n[rows])
    origin = p[rows] + n[rows] * 1e-6
    _follow_to_panel(stage, tracer, sel[rows], origin, refl, weight[rows],
                     base, g_uv, g_w, slot)


def _transmit_gather(stage, tracer, sel, p, n, d, idx, base, g_uv, g_w, slot):
    plane = stage.plane
    for i, obj in enumerate(stage.objects):
        if not isinstance(obj, Sphere) or obj.material.transmission <= 0:
            continue
        rows = np.where(idx == i)[0]
        if rows.size == 0:
            continue
        eta_in = 1.0 / obj.material.ior
        t_in = _refract(d[rows], n[rows], eta_in)
        # walk through the sphere and refract out the far side
        o_in = p[rows] - n[rows] * 1e-6
        t_exit = _ray_sphere(o_in, t_in, obj.center, obj.radius)
        ok = np.isfinite(t_exit)
        p_exit = o_in + np.where(ok, t_exit, 0.0)[:, None] * t_in
        n_exit = _sphere_normal(p_exit, obj.center)
        t_out = _refract(t_in, -n_exit, obj.material.ior)
        origin = p_exit + n_exit * 1e-6
        weight = np.full(rows.size, obj.material.transmission)
        _follow_to_panel(stage, tracer, sel[rows], origin, t_out, weight,
                         base, g_uv, g_w, slot)


def _follow_to_panel(stage, tracer, pix, origin, direction, weight, base, g_uv, g_w, slot):
    """Trace secondary rays; panel hits become gather samples, object hits get
    fixed shading, misses stay black."""
    plane = stage.plane
    t_obj, idx2 = tracer.intersect_objects(origin, direction)
    t_pl, u2, v2 = _ray_rect(origin, direction, plane.origin, plane.eu, plane.ev)
    to_plane = t_pl < t_obj
    g_uv[pix[to_plane], slot, 0] = u2[to_plane]
    g_uv[pix[to_plane], slot, 1] = v2[to_plane]
    g_w[pix[to_plane], slot, :] = weight[to_plane, None]
    to_obj = ~to_plane & (idx2 >= 0)
    if to_obj.any():
        p2 = origin[to_obj] + t_obj[to_obj, None] * direction[to_obj]
        n2 = tracer.normals(p2, idx2[to_obj])
        facing = np.einsum("nj,nj->n", n2, direction[to_obj]) > 0
        n2[facing] = -n2[facing]
        shade = tracer.shade_fixed(p2 + n2 * 1e-6, n2, idx2[to_obj])
        base[pix[to_obj]] += weight[to_obj, None] * shade


def trace_frame(stage: StageScene, camera: Camera, texture: np.ndarray | None,
                spp: int, seed: int = 0):
    """Render one frame: (image (H, W, 3) linear floats, mask (H, W) uint8)."""
    view = trace_view(stage, camera, spp, seed)
    return view.evaluate(texture), view.mask


# ---------------------------------------------------------------------------
# default stage, texture set, dataset generation


def default_stage(n_cameras: int = 8, width: int = 256, height: int = 256,
                  fov_deg: float = 46.0) -> StageScene:
    """Desk-scale stage: floor, mirror/glass spheres, matte objects, LED panel."""
    wood = Material(albedo=(0.50, 0.42, 0.33))
    chrome = Material(albedo=(0.9, 0.9, 0.95), mirror=0.92)
    glass = Material(albedo=(0.95, 0.95, 0.95), transmission=0.85, ior=1.45)
    red = Material(albedo=(0.72, 0.18, 0.14))
    blue = Material(albedo=(0.18, 0.42, 0.75))
    gold = Material(albedo=(0.85, 0.65, 0.25), mirror=0.35)
    objects = [
        Rect(origin=(-1.6, -1.4, 0.0), eu=(3.2, 0.0, 0.0), ev=(0.0, 2.6, 0.0), material=wood),
        Sphere(center=(-0.5, 0.15, 0.34), radius=0.34, material=chrome),
        Sphere(center=(0.52, -0.12, 0.27), radius=0.27, material=glass),
        Box(bmin=(-0.12, -0.52, 0.0), bmax=(0.24, -0.16, 0.52), material=red),
        Sphere(center=(0.08, 0.42, 0.22), radius=0.22, material=blue),
        Sphere(center=(-0.05, -0.15, 0.16), radius=0.16, material=gold),
    ]
    target = np.array([0.0, 0.15, 0.35])
    cameras = []
    for j in range(n_cameras):
        frac = j / max(n_cameras - 1, 1)
        az = np.radians(-38.0 + 76.0 * frac)
        radius = 2.7
        eye = np.array([radius * np.sin(az), -radius * np.cos(az),
                        0.75 + 0.35 * np.sin(frac * np.pi)])
        cameras.append(Camera.look_at(eye, target, fov_deg=fov_deg,
                                      width=width, height=height, cam_id=j))
    return StageScene(objects=objects, cameras=cameras)


def make_texture_set(count: int, size: int = 256, seed: int = 0) -> list:
    """Procedural backgrounds: gradients, checkers, noise, and blob collages."""
    rng = np.random.default_rng((seed, 0x7E8))
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    textures = []
    for k in range(count):
        kind = k % 4
        c0 = rng.uniform(0.15, 1.0, 3)
        c1 = rng.uniform(0.15, 1.0, 3)
        if kind == 0:
            ang = rng.uniform(0, 2 * np.pi)
            t = (np.cos(ang) * xx + np.sin(ang) * yy - min(0.0, np.cos(ang)) - min(0.0, np.sin(ang)))
            t = t / max(abs(np.cos(ang)) + abs(np.sin(ang)), 1e-9)
            tex = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]
        elif kind == 1:
            cells = int(rng.integers(3, 10))
            cb = ((xx * cells).astype(int) + (yy * cells).astype(int)) % 2
            tex = np.where(cb[..., None] > 0, c0[None, None, :], c1[None, None, :])
        elif kind == 2:
            noise = rng.random((size // 8, size // 8, 3))
            tex = np.kron(noise, np.ones((8, 8, 1)))[:size, :size]
            tex = 0.25 + 0.75 * tex
        else:
            tex = np.tile((0.3 * c0)[None, None, :], (size, size, 1))
            for _ in range(int(rng.integers(4, 9))):
                cx, cy = rng.uniform(0.1, 0.9, 2)
                s = rng.uniform(0.05, 0.25)
                col = rng.uniform(0.3, 1.0, 3)
                blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
                tex = tex + blob[..., None] * col[None, None, :]
            tex = np.clip(tex, 0, 1)
        textures.append(np.clip(tex, 0.0, 1.0))
    return textures


def generate_dataset(stage: StageScene, textures: list, out_dir, spp: int = 32,
                     seed: int = 0, n_test_textures: int = 0,
                     write_linear: bool = False) -> DatasetManifest:
    """Render the full capture protocol into `out_dir`.

    All cameras see every background plus one canonical (panel off) pass; the
    last camera and the last `n_test_textures` backgrounds are held out as the
    test split. Deterministic for a fixed seed.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "backgrounds", "canonical"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    lo, hi = stage.object_bounds()
    n_train_tex = len(textures) - n_test_textures
    if n_train_tex < 1:
        raise InvalidParameterError("need at least one training texture")

    manifest = DatasetManifest(width=stage.cameras[0].width,
                               height=stage.cameras[0].height, seed=seed,
                               bounds={"min": lo.tolist(), "max": hi.tolist()})
    for k, tex in enumerate(textures):
        path = f"backgrounds/k{k}.png"
        save_png(tex, out / path)
        manifest.backgrounds.append(
            {"id": k, "path": path, "split": "train" if k < n_train_tex else "test"})

    n_cams = len(stage.cameras)
    for j, cam in enumerate(stage.cameras):
        view = trace_view(stage, cam, spp, seed)
        cam_d = cam.to_dict()
        cam_d["split"] = "train" if j < n_cams - 1 or n_cams == 1 else "test"
        manifest.cameras.append(cam_d)
        mask_path = f"masks/j{j}.png"
        save_mask(view.mask, out / mask_path)
        canon_path = f"canonical/j{j}.png"
        canonical = view.evaluate(None)
        save_png(canonical, out / canon_path)
        manifest.frames.append(FrameRecord(j, None, canon_path, mask_path))
        if write_linear:
            np.save(out / f"canonical/j{j}.npy", canonical)
        for k, tex in enumerate(textures):
            img = view.evaluate(tex)
            img_path = f"images/j{j}_k{k}.png"
            save_png(img, out / img_path)
            manifest.frames.append(FrameRecord(j, k, img_path, mask_path))
            if write_linear:
                np.save(out / f"images/j{j}_k{k}.npy", img)
    manifest.save(out)
    return manifest
