"""Shared numerical primitives.

Quaternion/rotation conversion, anisotropic covariance construction, pinhole
camera projection with the EWA-style affine approximation, and real spherical
harmonics up to degree 3 (16 coefficients per channel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

# Low-pass regularization added to the diagonal of projected 2D covariances (px^2).
COV2D_REG = 0.3

# Camera-space depth below which a primitive is culled instead of projected.
Z_NEAR = 0.01

SH_NUM_COEFFS = 16

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: world-to-camera rigid transform plus intrinsics.

    Camera frame: +x right, +y down, +z forward. Pixel centers sit on integer
    coordinates, column = x, row = y.
    """

    rotation: np.ndarray          # (3, 3) world-to-camera rotation
    translation: np.ndarray       # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err >= 1e-6:
            raise InvalidParameterError(f"rotation is not orthonormal (deviation {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fov_deg=50.0,
                width=256, height=256, cam_id=0) -> "Camera":
        """Build a camera at `eye` looking toward `target` with world-up `up`."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        n = np.linalg.norm(right)
        if n < 1e-12:
            raise InvalidParameterError("view direction parallel to up vector")
        right /= n
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])  # world-to-camera rows
        trans = -rot @ eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) * 0.5)
        return cls(rotation=rot, translation=trans, fx=f, fy=f,
                   cx=(width - 1) * 0.5, cy=(height - 1) * 0.5,
                   width=width, height=height, cam_id=cam_id)

    def to_dict(self) -> dict:
        return {
            "id": int(self.cam_id),
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                   translation=np.array(d["translation"], dtype=np.float64),
                   fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                   width=d["width"], height=d["height"], cam_id=d.get("id", 0))


def quaternion_to_rotation(q) -> np.ndarray:
    """Convert a (w, x, y, z) quaternion to a 3x3 rotation matrix.

    The quaternion is normalized internally; a zero-norm quaternion is an error.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-30:
        raise InvalidParameterError("zero-norm quaternion")
    return quaternions_to_rotations(q[None])[0]


def quaternions_to_rotations(qs: np.ndarray) -> np.ndarray:
    """Batch quaternion-to-rotation. qs: (M, 4) in (w, x, y, z) order."""
    qs = np.asarray(qs, dtype=np.float64)
    norms = np.linalg.norm(qs, axis=1, keepdims=True)
    q = qs / norms
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((qs.shape[0], 3, 3), dtype=np.float64)
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def quaternion_multiply(a, b) -> np.ndarray:
    """Hamilton product a*b, both (w, x, y, z)."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def build_covariance(scales, quaternion) -> np.ndarray:
    """3D covariance R S S^T R^T from linear scales (3,) and a quaternion."""
    scales = np.asarray(scales, dtype=np.float64).reshape(3)
    if np.any(scales <= 0):
        raise InvalidParameterError("scales must be positive")
    return build_covariances(scales[None], np.asarray(quaternion, dtype=np.float64).reshape(1, 4))[0]


def build_covariances(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Batch covariance construction. scales: (M, 3) linear, quats: (M, 4)."""
    rot = quaternions_to_rotations(quats)
    ms = rot * scales[:, None, :]            # R @ diag(s)
    return ms @ np.swapaxes(ms, 1, 2)


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Real SH basis values up to degree 3 for unit directions. (..., 3) -> (..., 16)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    b = np.empty(dirs.shape[:-1] + (SH_NUM_COEFFS,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * y
    b[..., 2] = SH_C1 * z
    b[..., 3] = -SH_C1 * x
    b[..., 4] = SH_C2[0] * x * y
    b[..., 5] = SH_C2[1] * y * z
    b[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    b[..., 7] = SH_C2[3] * x * z
    b[..., 8] = SH_C2[4] * (xx - yy)
    b[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    b[..., 10] = SH_C3[1] * x * y * z
    b[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    b[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    b[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    b[..., 14] = SH_C3[5] * z * (xx - yy)
    b[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """Jacobian of sh_basis w.r.t. the direction components. (..., 3) -> (..., 16, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(dirs.shape[:-1] + (SH_NUM_COEFFS, 3), dtype=np.float64)
    g[..., 1, 1] = -SH_C1
    g[..., 2, 2] = SH_C1
    g[..., 3, 0] = -SH_C1
    g[..., 4, 0] = SH_C2[0] * y
    g[..., 4, 1] = SH_C2[0] * x
    g[..., 5, 1] = SH_C2[1] * z
    g[..., 5, 2] = SH_C2[1] * y
    g[..., 6, 0] = SH_C2[2] * (-2 * x)
    g[..., 6, 1] = SH_C2[2] * (-2 * y)
    g[..., 6, 2] = SH_C2[2] * (4 * z)
    g[..., 7, 0] = SH_C2[3] * z
    g[..., 7, 2] = SH_C2[3] * x
    g[..., 8, 0] = SH_C2[4] * (2 * x)
    g[..., 8, 1] = SH_C2[4] * (-2 * y)
    g[..., 9, 0] = SH_C3[0] * 6 * x * y
    g[..., 9, 1] = SH_C3[0] * (3 * x * x - 3 * y * y)
    g[..., 10, 0] = SH_C3[1] * y * z
    g[..., 10, 1] = SH_C3[1] * x * z
    g[..., 10, 2] = SH_C3[1] * x * y
    g[..., 11, 0] = SH_C3[2] * (-2 * x * y)
    g[..., 11, 1] = SH_C3[2] * (4 * z * z - x * x - 3 * y * y)
    g[..., 11, 2] = SH_C3[2] * (8 * y * z)
    g[..., 12, 0] = SH_C3[3] * (-6 * x * z)
    g[..., 12, 1] = SH_C3[3] * (-6 * y * z)
    g[..., 12, 2] = SH_C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)
    g[..., 13, 0] = SH_C3[4] * (4 * z * z - 3 * x * x - y * y)
    g[..., 13, 1] = SH_C3[4] * (-2 * x * y)
    g[..., 13, 2] = SH_C3[4] * (8 * x * z)
    g[..., 14, 0] = SH_C3[5] * (2 * x * z)
    g[..., 14, 1] = SH_C3[5] * (-2 * y * z)
    g[..., 14, 2] = SH_C3[5] * (x * x - y * y)
    g[..., 15, 0] = SH_C3[6] * (3 * x * x - 3 * y * y)
    g[..., 15, 1] = SH_C3[6] * (-6 * x * y)
    del zero
    return g


def eval_sh(coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Evaluate SH coefficients for one unit direction.

    coeffs: (16, D) -> returns (D,). Linear in the coefficients.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != SH_NUM_COEFFS:
        raise InvalidParameterError(f"expected {SH_NUM_COEFFS} SH coefficients, got {coeffs.shape[0]}")
    return sh_basis(np.asarray(direction, dtype=np.float64)) @ coeffs


def eval_sh_batch(coeffs: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """coeffs: (M, 16, D), dirs: (M, 3) -> (M, D)."""
    return np.einsum("mk,mkd->md", sh_basis(dirs), coeffs)


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray       # (2,) pixel coordinates
    cov2d: np.ndarray        # (2, 2) regularized screen-space covariance
    depth: float             # camera-space z
    visible: bool            # False when behind the near plane


def project_gaussian(position, cov3d, camera: Camera) -> ProjectedGaussian:
    """Project one Gaussian (world mean + covariance) into screen space."""
    mean2d, cov2d, depth, visible = project_gaussians(
        np.asarray(position, dtype=np.float64).reshape(1, 3),
        np.asarray(cov3d, dtype=np.float64).reshape(1, 3, 3), camera)
    return ProjectedGaussian(mean2d[0], cov2d[0], float(depth[0]), bool(visible[0]))


def project_gaussians(positions: np.ndarray, covs3d: np.ndarray, camera: Camera):
    """Batch perspective projection with first-order covariance transport.

    Returns (means2d (M,2), covs2d (M,2,2), depths (M,), visible (M,)).
    Entries with depth <= near plane are flagged, not raised.
    """
    xc = camera.world_to_cam(positions)
    z = xc[:, 2]
    visible = z > Z_NEAR
    zs = np.where(visible, z, 1.0)  # keep the math finite for culled entries

    means2d = np.empty((positions.shape[0], 2), dtype=np.float64)
    means2d[:, 0] = camera.fx * xc[:, 0] / zs + camera.cx
    means2d[:, 1] = camera.fy * xc[:, 1] / zs + camera.cy

    jw = _projection_jacobians(xc, zs, camera) @ camera.rotation
    covs2d = jw @ covs3d @ np.swapaxes(jw, 1, 2)
    covs2d[:, 0, 0] += COV2D_REG
    covs2d[:, 1, 1] += COV2D_REG
    return means2d, covs2d, z, visible


def _projection_jacobians(xc: np.ndarray, zs: np.ndarray, camera: Camera) -> np.ndarray:
    """Jacobian of pinhole projection at each camera-space point. (M, 2, 3)."""
    m = xc.shape[0]
    inv_z = 1.0 / zs
    j = np.zeros((m, 2, 3), dtype=np.float64)
    j[:, 0, 0] = camera.fx * inv_z
    j[:, 0, 2] = -camera.fx * xc[:, 0] * inv_z * inv_z
    j[:, 1, 1] = camera.fy * inv_z
    j[:, 1, 2] = -camera.fy * xc[:, 1] * inv_z * inv_z
    return j


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)
