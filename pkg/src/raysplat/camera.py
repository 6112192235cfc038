"""Camera model, Plücker ray bundles, and rigid-pose conversions.

Conventions: poses are world-to-camera (x_cam = R x_world + T), right-handed,
+z forward; pixel centers sit at integer coordinates. Ray bundles follow the
Plücker line parameterization P = (d, m) with unit direction d and moment
m = c x d taken about the world origin, so every ray satisfies <d, m> = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

__all__ = [
    "Camera", "PlueckerRayMap", "PoseNoiseSpec", "RigidTransform",
    "GeometryError", "DegenerateRaysError",
    "camera_to_rays", "rays_to_camera", "rays_to_camera_t",
    "perturb_pose", "relative_pose", "patch_center_pixels",
    "so3_exp", "so3_log", "canonical_directions",
]


class GeometryError(Exception):
    """Invalid camera or ray-bundle data."""


class DegenerateRaysError(GeometryError):
    """Ray bundle does not constrain a unique pose (e.g. all rays parallel)."""


def _check_rotation(r: np.ndarray, tol=1e-9):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {r.shape}")
    if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
        raise GeometryError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise GeometryError("rotation determinant is not +1")
    return r


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "R", _check_rotation(self.R))
        t = np.asarray(self.T, dtype=np.float64).reshape(3)
        object.__setattr__(self, "T", t)
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive: {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image extents must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates, c = -R^T T."""
        return -self.R.T @ self.T

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.T

    def project(self, points: np.ndarray):
        """World points (N, 3) -> pixel coords (N, 2) and camera-frame depth (N,)."""
        pc = self.world_to_cam(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def replace_pose(self, r: np.ndarray, t: np.ndarray) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, r, t,
                      self.width, self.height)


@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _check_rotation(self.R))
        object.__setattr__(self, "t",
                           np.asarray(self.t, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self o other)(x) = self(other(x))."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)


@dataclass(frozen=True)
class PlueckerRayMap:
    """Patch-resolution grid of world-frame Plücker rays."""

    d: np.ndarray  # (P_h, P_w, 3) unit directions
    m: np.ndarray  # (P_h, P_w, 3) moments about the world origin

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        m = np.asarray(self.m, dtype=np.float64)
        if d.ndim != 3 or d.shape[-1] != 3 or d.shape != m.shape:
            raise GeometryError(f"bad ray grid shapes {d.shape}, {m.shape}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "m", m)

    @property
    def patch_shape(self):
        return self.d.shape[:2]

    def flat(self):
        return self.d.reshape(-1, 3), self.m.reshape(-1, 3)

    def validate(self, tol=1e-9):
        norms = np.linalg.norm(self.d, axis=-1)
        if np.max(np.abs(norms - 1.0)) > tol:
            raise GeometryError("ray directions are not unit length")
        dots = np.abs(np.sum(self.d * self.m, axis=-1))
        if np.max(dots) > tol:
            raise GeometryError("Plücker constraint <d, m> = 0 violated")
        return self


@dataclass(frozen=True)
class PoseNoiseSpec:
    sigma: float
    seed: int

    def __post_init__(self):
        if self.sigma < 0:
            raise GeometryError(f"noise sigma must be >= 0, got {self.sigma}")


# ---------------------------------------------------------------------------
# SO(3) helpers
# ---------------------------------------------------------------------------

def _hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of an axis-angle 3-vector."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _hat(w)
    k = _hat(w / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    r = np.asarray(r, dtype=np.float64)
    cos = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-9:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0],
                               r[1, 0] - r[0, 1]])
    if theta > np.pi - 1e-6:
        # near pi the off-diagonal difference vanishes; use the symmetric part
        a = np.sqrt(np.maximum(np.diag(r) - cos, 0.0) / (1.0 - cos))
        # fix signs from the skew part
        vex = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        signs = np.where(vex >= 0, 1.0, -1.0)
        return theta * a * signs
    vex = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta / (2.0 * np.sin(theta)) * vex


# ---------------------------------------------------------------------------
# Ray bundle generation
# ---------------------------------------------------------------------------

def patch_center_pixels(width: int, height: int, patch_w: int, patch_h: int):
    """Pixel coordinates (P_h, P_w, 2) of patch centers; grids must divide."""
    if width % patch_w or height % patch_h:
        raise GeometryError(
            f"patch grid {patch_w}x{patch_h} does not divide image {width}x{height}")
    sx = width // patch_w
    sy = height // patch_h
    u = np.arange(patch_w) * sx + (sx - 1) / 2.0
    v = np.arange(patch_h) * sy + (sy - 1) / 2.0
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def canonical_directions(fx, fy, cx, cy, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame directions K^-1 [u, v, 1] for pixel coords (..., 2)."""
    if fx <= 0 or fy <= 0:
        raise GeometryError("degenerate intrinsics")
    x = (pixels[..., 0] - cx) / fx
    y = (pixels[..., 1] - cy) / fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def camera_to_rays(cam: Camera, patch_h: int, patch_w: int) -> PlueckerRayMap:
    """Plücker rays through the patch-center pixels of a camera."""
    pix = patch_center_pixels(cam.width, cam.height, patch_w, patch_h)
    dhat = canonical_directions(cam.fx, cam.fy, cam.cx, cam.cy, pix)
    d = dhat @ cam.R  # row-vector form of R^T dhat
    c = cam.center
    m = np.cross(np.broadcast_to(c, d.shape), d)
    return PlueckerRayMap(d, m).validate()


# ---------------------------------------------------------------------------
# Rays -> pose (the inverse conversion)
# ---------------------------------------------------------------------------

def _ray_normal_system(d: np.ndarray, m: np.ndarray):
    """Normal equations of min_c sum ||c x d_l - m_l||^2."""
    n = d.shape[0]
    gram = d.T @ d
    a = np.sum(d * d) * np.eye(3) - gram
    rhs = np.sum(np.cross(d, m), axis=0)
    return a, rhs, n


def rays_to_camera(rays: PlueckerRayMap, fx, fy, cx, cy,
                   width: int, height: int) -> Camera:
    """Recover the world-to-camera pose whose patch rays best match ``rays``.

    The camera center solves a linear least squares over all rays; the
    rotation is the orthogonal Procrustes alignment of the canonical
    camera-frame directions onto the world directions.
    """
    d, m = rays.flat()
    if d.shape[0] < 2:
        raise DegenerateRaysError("need at least 2 rays")
    a, rhs, _ = _ray_normal_system(d, m)
    evals = np.linalg.eigvalsh(a)
    if evals[0] < 1e-10 * max(evals[-1], 1.0):
        raise DegenerateRaysError("ray bundle is rank deficient (parallel rays)")
    c = np.linalg.solve(a + 1e-12 * np.eye(3), rhs)

    ph, pw = rays.patch_shape
    pix = patch_center_pixels(width, height, pw, ph)
    dhat = canonical_directions(fx, fy, cx, cy, pix).reshape(-1, 3)
    mmat = d.T @ dhat  # sum_l d_l dhat_l^T
    u, s, vt = np.linalg.svd(mmat)
    sign = np.sign(np.linalg.det(u @ vt))
    r_cam_to_world = (u * np.array([1.0, 1.0, sign])) @ vt
    r = r_cam_to_world.T
    return Camera(fx, fy, cx, cy, r, -r @ c, width, height)


def rays_to_camera_t(d: dc.Tensor, m: dc.Tensor, dhat: np.ndarray):
    """Differentiable twin of ``rays_to_camera`` on flat (N, 3) ray tensors.

    ``dhat`` holds the constant canonical camera-frame unit directions in the
    same row order. Returns (R, T) tensors; agrees with the numpy version to
    machine precision on identical inputs.
    """
    dhat = np.asarray(dhat, dtype=np.float64).reshape(-1, 3)
    eye = dc.constant(np.eye(3))
    a = (d * d).sum() * eye - dc.matmul(dc.transpose(d), d) + 1e-12 * eye
    rhs = cross_t(d, m).sum(axis=0)
    c = dc.linsolve(a, rhs)
    q = dc.procrustes_rotation(dc.matmul(dc.transpose(d), dc.constant(dhat)))
    r = dc.transpose(q)
    t = -dc.matmul(r, dc.reshape(c, (3, 1))).reshape((3,))
    return r, t


def cross_t(a: dc.Tensor, b: dc.Tensor) -> dc.Tensor:
    """Cross product along the last axis for (..., 3) tensors."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return dc.stack([a1 * b2 - a2 * b1,
                     a2 * b0 - a0 * b2,
                     a0 * b1 - a1 * b0], axis=-1)


# ---------------------------------------------------------------------------
# Pose noise and relative poses
# ---------------------------------------------------------------------------

def perturb_pose(cam: Camera, spec: PoseNoiseSpec) -> Camera:
    """Left-multiplied SE(3) tangent noise: [R|T] <- Exp(w) [R|T] + delta.

    w and delta are drawn i.i.d. N(0, sigma^2) per component, so the mean
    geodesic rotation error is sigma * 2 sqrt(2/pi) (about 0.91 deg at
    sigma = 0.01).
    """
    if spec.sigma == 0.0:
        return cam
    rng = np.random.default_rng(spec.seed)
    w = spec.sigma * rng.standard_normal(3)
    delta = spec.sigma * rng.standard_normal(3)
    rd = so3_exp(w)
    return cam.replace_pose(rd @ cam.R, rd @ cam.T + delta)


def relative_pose(cam_a: Camera, cam_b: Camera) -> RigidTransform:
    """Camera-frame transform taking cam_a coordinates to cam_b coordinates."""
    r = cam_b.R @ cam_a.R.T
    return RigidTransform(r, cam_b.T - r @ cam_a.T)
