"""Optimizable splat scene container, `.vpgs` serialization, and mask culling.

Every per-primitive quantity is stored in its unconstrained form: scales as
logs, opacity as a logit, the blur modifier as a pre-squash raw value, and
rotations as unnormalized quaternions renormalized at use.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .core_math import Camera, SH_NUM_COEFFS, sigmoid
from .errors import SceneFormatError

log = logging.getLogger(__name__)

MAGIC = b"VPGS"
VERSION = 1

# (field name, trailing shape after the leading M axis)
_FIELDS = (
    ("positions", (3,)),
    ("log_scales", (3,)),
    ("rotations", (4,)),
    ("opacity_logits", ()),
    ("color_sh", (SH_NUM_COEFFS, 3)),
    ("intensity_sh", (SH_NUM_COEFFS, 1)),
    ("uv_sh", (SH_NUM_COEFFS, 2)),
    ("mip_delta_raw", ()),
)


@dataclass
class SplatScene:
    positions: np.ndarray       # (M, 3)
    log_scales: np.ndarray      # (M, 3)
    rotations: np.ndarray       # (M, 4) quaternions, renormalized on use
    opacity_logits: np.ndarray  # (M,)
    color_sh: np.ndarray        # (M, 16, 3)
    intensity_sh: np.ndarray    # (M, 16, 1)
    uv_sh: np.ndarray           # (M, 16, 2)
    mip_delta_raw: np.ndarray   # (M,)

    def __post_init__(self):
        m = None
        for name, shape in _FIELDS:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if m is None:
                m = arr.shape[0]
            if arr.shape != (m,) + shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {(m,) + shape}")

    @property
    def m(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def mip_delta(self) -> np.ndarray:
        return sigmoid(self.mip_delta_raw)

    def copy(self) -> "SplatScene":
        return SplatScene(**{name: getattr(self, name).copy() for name, _ in _FIELDS})

    def select(self, index) -> "SplatScene":
        """Subset or reorder primitives by an integer or boolean index."""
        return SplatScene(**{name: getattr(self, name)[index] for name, _ in _FIELDS})

    @classmethod
    def concatenate(cls, scenes) -> "SplatScene":
        return cls(**{name: np.concatenate([getattr(s, name) for s in scenes])
                      for name, _ in _FIELDS})

    @classmethod
    def empty(cls) -> "SplatScene":
        return cls(**{name: np.zeros((0,) + shape) for name, shape in _FIELDS})

    def param_arrays(self) -> dict:
        return {name: getattr(self, name) for name, _ in _FIELDS}

    def allclose(self, other: "SplatScene") -> bool:
        return all(np.array_equal(getattr(self, name), getattr(other, name))
                   for name, _ in _FIELDS)


def save_scene(scene: SplatScene, path, metadata: dict | None = None) -> None:
    """Write a `.vpgs` file: header, per-field float64 arrays, sha256 trailer."""
    path = Path(path)
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IQ I", VERSION, scene.m, len(_FIELDS))
    for name, shape in _FIELDS:
        arr = getattr(scene, name)
        name_b = name.encode()
        buf += struct.pack("<H", len(name_b)) + name_b
        buf += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<Q", d)
        buf += arr.astype("<f8").tobytes()
    digest = hashlib.sha256(buf).digest()
    path.write_bytes(bytes(buf) + digest)
    if metadata is not None:
        save_sidecar(path, metadata)


def load_scene(path) -> SplatScene:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise SceneFormatError(f"{path}: not a scene file (bad magic)")
    if len(raw) < 48:
        raise SceneFormatError(f"{path}: truncated header")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise SceneFormatError(f"{path}: checksum mismatch")
    off = 4
    version, m, n_fields = struct.unpack_from("<IQ I", body, off)
    off += struct.calcsize("<IQ I")
    if version != VERSION:
        raise SceneFormatError(f"{path}: unsupported version {version}")
    arrays = {}
    try:
        for _ in range(n_fields):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            nbytes = count * 8
            if off + nbytes > len(body):
                raise SceneFormatError(f"{path}: truncated array data for '{name}'")
            arrays[name] = np.frombuffer(body, dtype="<f8", count=count,
                                         offset=off).reshape(shape).copy()
            off += nbytes
    except struct.error as exc:
        raise SceneFormatError(f"{path}: truncated file") from exc
    missing = [name for name, _ in _FIELDS if name not in arrays]
    if missing:
        raise SceneFormatError(f"{path}: missing fields {missing}")
    scene = SplatScene(**{name: arrays[name] for name, _ in _FIELDS})
    if scene.m != m:
        raise SceneFormatError(f"{path}: header count {m} != array length {scene.m}")
    return scene


def sidecar_path(scene_path) -> Path:
    return Path(scene_path).with_suffix(".meta.json")


def save_sidecar(scene_path, metadata: dict) -> None:
    sidecar_path(scene_path).write_text(json.dumps(metadata, indent=2, sort_keys=True))


def load_sidecar(scene_path) -> dict:
    p = sidecar_path(scene_path)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def mask_keep(scene: SplatScene, cameras, masks) -> np.ndarray:
    """Boolean keep-array: center projects to foreground in every covering view.

    `masks` maps camera id to a binary (H, W) array; 1 = foreground.
    """
    keep = np.ones(scene.m, dtype=bool)
    for cam in cameras:
        mask = masks[cam.cam_id]
        xc = cam.world_to_cam(scene.positions)
        z = xc[:, 2]
        in_front = z > 1e-9
        zs = np.where(in_front, z, 1.0)
        px = np.rint(cam.fx * xc[:, 0] / zs + cam.cx).astype(np.int64)
        py = np.rint(cam.fy * xc[:, 1] / zs + cam.cy).astype(np.int64)
        covered = in_front & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        idx = np.where(covered)[0]
        fg = mask[py[idx], px[idx]] > 0
        keep[idx[~fg]] = False
    return keep


def cull_by_mask(scene: SplatScene, cameras, masks) -> SplatScene:
    """Remove primitives whose projected center lands on background in any view."""
    keep = mask_keep(scene, cameras, masks)
    pruned = scene.select(keep)
    if pruned.m == 0 and scene.m > 0:
        log.warning("mask culling removed every primitive")
    return pruned
