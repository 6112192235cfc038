"""3D Gaussian primitives and the heads that decode them from fused volumes.

A GaussianSet stores one primitive per row: position mu, covariance factored
as scale (positive 3-vector) and unit quaternion, opacity alpha, and RGB
color, all in the canonical/world frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GaussianSet", "GaussianError", "quat_to_rot", "save_gaussians",
    "load_gaussians",
]


class GaussianError(Exception):
    pass


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4), wxyz."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass(frozen=True)
class GaussianSet:
    """N Gaussians: mu (N,3), scale (N,3), quat (N,4) wxyz, alpha (N,), color (N,3)."""

    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    alpha: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        for name in ("mu", "scale", "quat", "alpha", "color"):
            object.__setattr__(self, name,
                               np.asarray(getattr(self, name), dtype=np.float64))
        n = self.mu.shape[0]
        shapes = {"mu": (n, 3), "scale": (n, 3), "quat": (n, 4),
                  "alpha": (n,), "color": (n, 3)}
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise GaussianError(f"{name} has shape {got}, expected {want}")

    def __len__(self):
        return self.mu.shape[0]

    def covariances(self) -> np.ndarray:
        """Reconstructed Sigma = R diag(scale^2) R^T, shape (N, 3, 3)."""
        r = quat_to_rot(self.quat / np.linalg.norm(self.quat, axis=-1,
                                                   keepdims=True))
        l = r * self.scale[:, None, :]
        return l @ np.swapaxes(l, -1, -2)

    def validate(self, tol=1e-9) -> "GaussianSet":
        if len(self) and np.max(np.abs(np.linalg.norm(self.quat, axis=-1) - 1.0)) > tol:
            raise GaussianError("quaternions are not unit length")
        if np.any(self.alpha <= 0.0) or np.any(self.alpha >= 1.0):
            raise GaussianError("opacity must lie in the open unit interval")
        if np.any(self.color <= 0.0) or np.any(self.color >= 1.0):
            raise GaussianError("colors must lie in the open unit interval")
        if np.any(self.scale <= 0.0):
            raise GaussianError("scales must be positive")
        if not all(np.all(np.isfinite(getattr(self, f)))
                   for f in ("mu", "scale", "quat", "alpha", "color")):
            raise GaussianError("non-finite Gaussian parameters")
        return self


_HEADER_END = b"end_header\n"


def save_gaussians(path, gs: GaussianSet):
    """Structured binary table: text header, then one packed row per Gaussian.

    Row layout (little-endian float32): mu[3], scale[3], quat[4], alpha,
    rgb[3] - 14 values.
    """
    rows = np.concatenate([gs.mu, gs.scale, gs.quat,
                           gs.alpha[:, None], gs.color], axis=1)
    header = (f"gaussian_table 1\ncount {len(gs)}\n"
              "frame canonical world-to-camera right-handed +z-forward\n"
              "row mu3 scale3 quat4_wxyz alpha1 rgb3 float32_le\n").encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(_HEADER_END)
        f.write(rows.astype("<f4").tobytes())


def load_gaussians(path) -> GaussianSet:
    with open(path, "rb") as f:
        blob = f.read()
    split = blob.find(_HEADER_END)
    if split < 0 or not blob.startswith(b"gaussian_table 1\n"):
        raise GaussianError(f"{path}: not a gaussian table")
    header = blob[:split].decode()
    count = None
    for line in header.splitlines():
        if line.startswith("count "):
            count = int(line.split()[1])
    if count is None:
        raise GaussianError(f"{path}: header missing count")
    rows = np.frombuffer(blob[split + len(_HEADER_END):], dtype="<f4")
    rows = rows.reshape(count, 14).astype(np.float64)
    return GaussianSet(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10],
                       rows[:, 10], rows[:, 11:14])
