"""Image quality and pose accuracy metrics.

SSIM exists in two forms sharing one implementation: a tape-recorded version
for use inside losses and a float wrapper for evaluation. PSNR is capped so
identical images compare cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = ["MetricsError", "PoseError", "psnr", "ssim", "ssim_t",
           "pose_error", "chamfer_distance"]

_PSNR_CAP = 99.0
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_WINDOW = 11
_SIGMA = 1.5


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class PoseError:
    """Geodesic rotation error and angular translation error, degrees.

    translation_deg is None when either translation is too short to define
    a direction.
    """

    rotation_deg: float
    translation_deg: float | None


# -- PSNR -------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for unit-range images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-_PSNR_CAP / 10.0):
        return _PSNR_CAP
    return 10.0 * np.log10(1.0 / mse)


# -- SSIM -------------------------------------------------------------------

def _gauss_1d(size=_WINDOW, sigma=_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_matrix(n: int) -> np.ndarray:
    """(n - 10, n) matrix whose rows are sliding 11-tap Gaussian windows."""
    if n < _WINDOW:
        raise MetricsError(f"image side {n} smaller than the {_WINDOW}-pixel "
                           "SSIM window")
    k = _gauss_1d()
    rows = n - _WINDOW + 1
    g = np.zeros((rows, n))
    for i in range(rows):
        g[i, i:i + _WINDOW] = k
    return g


def _gray(x: Tensor) -> Tensor:
    if x.ndim == 3:
        return dc.tmean(x, axis=-1)
    if x.ndim == 2:
        return x
    raise MetricsError(f"expected (H, W) or (H, W, 3) image, got {x.shape}")


def ssim_t(a, b) -> Tensor:
    """Mean local SSIM over valid 11x11 Gaussian windows, on the tape.

    Inputs are unit-range images, grayscaled by channel mean. The separable
    window is applied with banded matrix products, so the result is
    differentiable in both images.
    """
    a = a if isinstance(a, Tensor) else dc.constant(np.asarray(a, dtype=np.float64))
    b = b if isinstance(b, Tensor) else dc.constant(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise MetricsError(f"shape mismatch {a.shape} vs {b.shape}")
    ga = _gray(a)
    gb = _gray(b)
    h, w = ga.shape
    gh = dc.constant(_window_matrix(h))
    gw_t = dc.constant(_window_matrix(w).T)

    def blur(x):
        return dc.matmul(dc.matmul(gh, x), gw_t)

    mu_a = blur(ga)
    mu_b = blur(gb)
    var_a = blur(ga * ga) - mu_a * mu_a
    var_b = blur(gb * gb) - mu_b * mu_b
    cov = blur(ga * gb) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return dc.tmean(num / den)


def ssim(a, b) -> float:
    arr_a = np.asarray(a, dtype=np.float64)
    arr_b = np.asarray(b, dtype=np.float64)
    return float(ssim_t(dc.constant(arr_a), dc.constant(arr_b)).data)


# -- pose errors ------------------------------------------------------------

def pose_error(pred, gt) -> PoseError:
    """Errors between two relative poses given as (R, T) carriers.

    Accepts anything exposing .r/.t or .R/.T. Rotation is the geodesic
    angle of R_gt R_pred^T; translation is the angle between directions,
    invariant to positive scaling.
    """
    r_p, t_p = _pose_parts(pred)
    r_g, t_g = _pose_parts(gt)
    cosang = (np.trace(r_g @ r_p.T) - 1.0) / 2.0
    rot = float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    n_p = np.linalg.norm(t_p)
    n_g = np.linalg.norm(t_g)
    if n_g < 1e-12 or n_p < 1e-12:
        return PoseError(rot, None)
    cost = np.dot(t_p, t_g) / (n_p * n_g)
    return PoseError(rot, float(np.degrees(np.arccos(np.clip(cost, -1.0, 1.0)))))


def _pose_parts(pose):
    for rot_name, t_name in (("R", "t"), ("R", "T"), ("r", "t")):
        if hasattr(pose, rot_name) and hasattr(pose, t_name):
            return (np.asarray(getattr(pose, rot_name), dtype=np.float64),
                    np.asarray(getattr(pose, t_name), dtype=np.float64).reshape(3))
    raise MetricsError(f"cannot read a rigid pose from {type(pose).__name__}")


# -- point-set distance -----------------------------------------------------

def chamfer_distance(a: np.ndarray, b: np.ndarray, chunk=512) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise MetricsError("chamfer distance needs non-empty point sets")

    def one_way(src, dst):
        mins = np.empty(len(src))
        for i in range(0, len(src), chunk):
            block = src[i:i + chunk]
            d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(-1)
            mins[i:i + chunk] = d2.min(axis=1)
        return np.sqrt(mins).mean()

    return 0.5 * (one_way(a, b) + one_way(b, a))
