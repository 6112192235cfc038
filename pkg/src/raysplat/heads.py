"""Decoding canonical volumes into dense anchored Gaussians.

The depth head turns the geometry volume into a pixel-aligned expected
depth map; anchors sit on the canonical pixel rays at that depth; an offset
head spreads K primitives around each anchor inside a smoothly clamped
radius; a parameter head emits opacity, scale, orientation, and color from
the positionally encoded offset plus the pixel's feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .camera import Camera
from .costvol import DepthHypothesisSet
from .diffcore import Tensor, nn
from .features import upsample_bilinear
from .gaussians import GaussianSet

__all__ = ["AnchorField", "OffsetField", "GaussianTensors", "GaussianHead",
           "positional_encode"]

_PE_OCTAVES = 4
_SCALE_SHIFT = -4.0        # softplus(-4) ~ 0.018 scene units at init
_SCALE_FLOOR = 1e-4


@dataclass
class AnchorField:
    z: Tensor        # (H, W) expected depth
    p: Tensor        # (H, W, 3) anchor positions, p = o + z * d
    dirs: np.ndarray  # (H, W, 3) pixel ray directions with unit z component
    origin: np.ndarray


@dataclass
class OffsetField:
    dp: Tensor       # (H, W, K, 3), norms strictly inside rho
    rho: Tensor      # (H, W) local clamp radius


@dataclass
class GaussianTensors:
    """Flat per-primitive parameter tensors, still on the tape."""

    mu: Tensor       # (N, 3)
    scale: Tensor    # (N, 3)
    quat: Tensor     # (N, 4)
    alpha: Tensor    # (N,)
    color: Tensor    # (N, 3)

    @property
    def count(self):
        return self.mu.shape[0]

    def to_set(self) -> GaussianSet:
        return GaussianSet(
            mu=self.mu.data.copy(), scale=self.scale.data.copy(),
            quat=self.quat.data.copy(), alpha=self.alpha.data.copy(),
            color=self.color.data.copy())


def positional_encode(x: Tensor) -> Tensor:
    """NeRF-style sin/cos at 4 octaves per coordinate: (..., 3) -> (..., 24)."""
    parts = []
    for octave in range(_PE_OCTAVES):
        scaled = x * float(2 ** octave)
        parts.append(dc.sin(scaled))
        parts.append(dc.cos(scaled))
    return dc.concat(parts, axis=-1)


class GaussianHead:
    def __init__(self, store: nn.ParamStore, rng, c_geo: int, c_feat: int,
                 depth_count: int, k: int = 3, hidden: int = 64,
                 rho_factor: float = 2.0, name: str = "head"):
        if k < 1:
            raise ValueError("need K >= 1 primitives per anchor")
        if rho_factor <= 0:
            raise ValueError("offset radius factor must be positive")
        self.k = k
        self.rho_factor = rho_factor
        self.depth_count = depth_count
        self.f_g = nn.Mlp(store, f"{name}.f_g", c_geo, hidden, depth_count,
                          rng)
        self.f_o = nn.Mlp(store, f"{name}.f_o", c_feat, hidden, 3 * k, rng,
                          zero_out=True)
        self.f_p = nn.Mlp(store, f"{name}.f_p", 6 * _PE_OCTAVES + c_feat,
                          hidden, 11, rng)

    # -- depth ---------------------------------------------------------------

    def expected_depth(self, v_g: Tensor, hyps: DepthHypothesisSet,
                       out_h: int, out_w: int) -> Tensor:
        """Softmax-weighted depth expectation, upsampled to pixels."""
        h, w, c = v_g.shape
        logits = self.f_g(dc.reshape(v_g, (h * w, c)))
        probs = dc.softmax(logits, axis=-1)
        z = dc.matmul(probs, dc.constant(hyps.depths.reshape(-1, 1)))
        up = upsample_bilinear(dc.reshape(z, (h, w, 1)), out_h, out_w)
        return dc.reshape(up, (out_h, out_w))

    # -- anchors -------------------------------------------------------------

    @staticmethod
    def place_anchors(z: Tensor, cam: Camera) -> AnchorField:
        """Anchors p = o + z*d on the pixel rays; d keeps unit z component,
        so z is plane depth in the camera frame."""
        hh, ww = z.shape
        if (hh, ww) != (cam.height, cam.width):
            raise ValueError("depth map does not match camera resolution")
        us = np.arange(ww, dtype=np.float64)
        vs = np.arange(hh, dtype=np.float64)
        uu, vv = np.meshgrid(us, vs)
        d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy,
                          np.ones_like(uu)], axis=-1)
        dirs = d_cam @ cam.R           # rows: R^T d
        origin = cam.center
        p = dc.constant(origin) + dc.reshape(z, (hh, ww, 1)) * dc.constant(dirs)
        return AnchorField(z=z, p=p, dirs=dirs, origin=origin)

    # -- offsets -------------------------------------------------------------

    def predict_offsets(self, v_f: Tensor, z: Tensor,
                        hyps: DepthHypothesisSet) -> OffsetField:
        """K offsets per pixel, smoothly clamped to twice the local plane gap."""
        hh, ww, c = v_f.shape
        raw = self.f_o(dc.reshape(v_f, (hh * ww, c)))
        raw = dc.reshape(raw, (hh, ww, self.k, 3))
        # inverse-depth planes: local spacing dz = z^2 * d(1/z)
        dinv = (1.0 / hyps.near - 1.0 / hyps.far) / (hyps.count - 1)
        rho = z * z * (self.rho_factor * dinv)
        n = dc.sqrt(dc.tsum(raw * raw, axis=-1, keepdims=True) + 1e-24)
        rho_b = dc.reshape(rho, (hh, ww, 1, 1))
        dp = raw * (rho_b * dc.tanh(n / rho_b) / n)
        return OffsetField(dp=dp, rho=rho)

    # -- parameters ----------------------------------------------------------

    def predict_params(self, offsets: OffsetField, v_f: Tensor,
                       anchors: AnchorField) -> GaussianTensors:
        hh, ww, c = v_f.shape
        k = self.k
        n = hh * ww * k
        dp = dc.reshape(offsets.dp, (n, 3))
        pe = positional_encode(dp)
        # each of the K primitives reads the feature at its anchor pixel
        feat = dc.reshape(v_f, (hh * ww, 1, c))
        feat = dc.concat([feat] * k, axis=1)
        feat = dc.reshape(feat, (n, c))
        out = self.f_p(dc.concat([pe, feat], axis=-1))

        alpha = dc.sigmoid(out[:, 0])
        scale = dc.softplus(out[:, 1:4] + _SCALE_SHIFT) + _SCALE_FLOOR
        quat_raw = out[:, 4:8] + dc.constant(np.array([1.0, 0.0, 0.0, 0.0]))
        qn = dc.sqrt(dc.tsum(quat_raw * quat_raw, axis=-1, keepdims=True)
                     + 1e-24)
        quat = quat_raw / qn
        color = dc.sigmoid(out[:, 8:11])

        mu_anchor = dc.reshape(anchors.p, (hh * ww, 1, 3))
        mu = dc.reshape(mu_anchor + offsets.dp.reshape((hh * ww, k, 3)),
                        (n, 3))
        return GaussianTensors(mu=mu, scale=scale, quat=quat, alpha=alpha,
                               color=color)

    # -- one-call decode ------------------------------------------------------

    def decode(self, v_g: Tensor, v_f: Tensor, hyps: DepthHypothesisSet,
               cam: Camera):
        """Full head: volumes -> (gaussians, anchors, offsets)."""
        z = self.expected_depth(v_g, hyps, cam.height, cam.width)
        anchors = self.place_anchors(z, cam)
        offsets = self.predict_offsets(v_f, z, hyps)
        gs = self.predict_params(offsets, v_f, anchors)
        return gs, anchors, offsets
