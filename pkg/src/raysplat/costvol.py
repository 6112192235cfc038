"""Plane-sweep matching volumes between posed views.

Features from each source view are warped into a reference view at a sweep
of depth hypotheses, correlated channel-wise against the reference features,
and optionally refined by attention over per-patch ray tokens. The warp is
written in tape ops, so gradients reach the features and, when poses are
given as tensors, the poses as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .camera import Camera, patch_center_pixels
from .diffcore import Tensor, nn

__all__ = ["DepthHypothesisSet", "CostVolume", "CostAggregator",
           "plane_sweep_warp", "correlate"]


@dataclass(frozen=True)
class DepthHypothesisSet:
    """Depth candidates uniform in inverse depth on [near, far]."""

    near: float
    far: float
    count: int = 32
    law: str = "inverse_depth"

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.count < 2:
            raise ValueError("need at least 2 depth hypotheses")
        if self.law != "inverse_depth":
            raise ValueError(f"unknown spacing law {self.law!r}")

    @property
    def depths(self) -> np.ndarray:
        inv = np.linspace(1.0 / self.near, 1.0 / self.far, self.count)
        return 1.0 / inv

    def nearest_index(self, depth) -> np.ndarray:
        """Index of the hypothesis closest in inverse depth."""
        inv = 1.0 / self.depths
        lo, hi = inv[-1], inv[0]
        k = (1.0 / np.asarray(depth) - hi) / (lo - hi) * (self.count - 1)
        return np.clip(np.round(k), 0, self.count - 1).astype(np.int64)


@dataclass
class CostVolume:
    data: Tensor            # (h, w, D)
    mask: np.ndarray        # bool (h, w, D); False entries are exactly 0

    @property
    def shape(self):
        return self.data.shape


def _grid_dirs(cam: Camera, gh: int, gw: int) -> np.ndarray:
    """Unit-z camera directions through the centers of a gh x gw patch grid."""
    pix = patch_center_pixels(cam.width, cam.height, gw, gh)
    x = (pix[..., 0] - cam.cx) / cam.fx
    y = (pix[..., 1] - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def plane_sweep_warp(src_feat, src_cam: Camera, ref_cam: Camera,
                     hyps: DepthHypothesisSet, stride: int = 4,
                     src_pose=None, ref_pose=None):
    """Warp source features onto reference depth planes.

    Returns (warped, mask): a (D, h, w, C) tensor plus a boolean validity
    mask of the same spatial shape. Masked samples are exactly zero. Poses
    default to the numeric cameras; passing (R, T) tensor pairs makes the
    sweep differentiable in the corresponding pose.
    """
    feat = src_feat if isinstance(src_feat, Tensor) else dc.constant(src_feat)
    h_s, w_s, _ = feat.shape
    if (h_s * stride, w_s * stride) != (src_cam.height, src_cam.width):
        raise ValueError("source feature grid does not match camera/stride")
    gh, gw = ref_cam.height // stride, ref_cam.width // stride
    depths = hyps.depths
    nd = hyps.count

    dirs = _grid_dirs(ref_cam, gh, gw)                       # (gh, gw, 3)
    p_ref = depths[:, None, None, None] * dirs[None]         # (D, gh, gw, 3)
    p_ref = p_ref.reshape(-1, 3)

    if ref_pose is None:
        p_world = dc.constant((p_ref - ref_cam.T) @ ref_cam.R)
    else:
        r_ref, t_ref = ref_pose
        p_world = dc.matmul(dc.constant(p_ref) - t_ref, r_ref)
    if src_pose is None:
        r_src = dc.constant(src_cam.R)
        t_src = dc.constant(src_cam.T)
    else:
        r_src, t_src = src_pose
    p_src = dc.matmul(p_world, dc.transpose(r_src)) + t_src  # (N, 3)

    xs = p_src[:, 0]
    ys = p_src[:, 1]
    zs = p_src[:, 2]
    front = zs.data > 1e-6
    safe_z = dc.where(front, zs, np.ones(zs.shape))
    off = (stride - 1) / 2.0
    px = ((xs / safe_z) * src_cam.fx + (src_cam.cx - off)) * (1.0 / stride)
    py = ((ys / safe_z) * src_cam.fy + (src_cam.cy - off)) * (1.0 / stride)
    coords = dc.reshape(dc.stack([px, py], axis=-1), (nd, gh, gw, 2))
    warped = dc.bilinear_sample(feat, coords, mode="zero")

    eps = 1e-6  # keep boundary-exact samples (identity warp) valid
    mask = (front
            & (px.data >= -eps) & (px.data <= w_s - 1.0 + eps)
            & (py.data >= -eps) & (py.data <= h_s - 1.0 + eps)).reshape(nd, gh, gw)
    warped = warped * dc.constant(mask[..., None].astype(np.float64))
    return warped, mask


def correlate(ref_feat, warped_stacks, masks) -> CostVolume:
    """Channel dot products against each warped source, summed over sources.

    ref_feat: (h, w, C); each warped stack: (D, h, w, C) with its mask.
    Output entries are divided by sqrt(C); invalid samples contribute 0.
    """
    ref = ref_feat if isinstance(ref_feat, Tensor) else dc.constant(ref_feat)
    c = ref.shape[-1]
    acc = None
    for wj in warped_stacks:
        term = dc.tsum(wj * ref, axis=-1)          # (D, h, w)
        acc = term if acc is None else acc + term
    cost = dc.transpose(acc, (1, 2, 0)) * (1.0 / np.sqrt(c))
    any_valid = np.any(np.stack(list(masks)), axis=0)
    return CostVolume(cost, np.transpose(any_valid, (1, 2, 0)))


class CostAggregator:
    """Residual refinement of a cost volume by attention over ray tokens.

    Per-patch queries come from the concatenated (cost, feature) vector;
    keys and values are MLP-lifted Plücker rays. The output projection is
    zero-initialized, so the block starts as the identity.
    """

    def __init__(self, store: nn.ParamStore, rng, depth_count: int,
                 feat_dim: int, d_model: int = 64, heads: int = 4,
                 name: str = "agg"):
        self.depth_count = depth_count
        self.tok = nn.Linear(store, f"{name}.tok", depth_count + feat_dim,
                             d_model, rng)
        self.ray_mlp = nn.Mlp(store, f"{name}.ray", 6, d_model, d_model, rng)
        self.ln_q = nn.LayerNorm(store, f"{name}.ln_q", d_model)
        self.ln_kv = nn.LayerNorm(store, f"{name}.ln_kv", d_model)
        self.xa = nn.CrossAttention(store, f"{name}.xa", d_model, heads, rng,
                                    zero_out=False)
        self.out = nn.Linear(store, f"{name}.out", d_model, depth_count, rng,
                             zero_init=True)

    def __call__(self, cost, rays, feat) -> Tensor:
        """cost: (h, w, D); rays: (d, m) tensors of (h, w, 3); feat: (h, w, C)."""
        cost_t = cost.data if isinstance(cost, CostVolume) else cost
        cost_t = cost_t if isinstance(cost_t, Tensor) else dc.constant(cost_t)
        h, w, nd = cost_t.shape
        if nd != self.depth_count:
            raise ValueError(f"expected {self.depth_count} planes, got {nd}")
        feat_t = feat if isinstance(feat, Tensor) else dc.constant(feat)
        d_t, m_t = rays
        q = self.tok(dc.reshape(dc.concat([cost_t, feat_t], axis=-1),
                                (h * w, nd + feat_t.shape[-1])))
        ray_tok = self.ray_mlp(dc.reshape(dc.concat([d_t, m_t], axis=-1),
                                          (h * w, 6)))
        mixed = self.xa(self.ln_q(q), self.ln_kv(ray_tok))
        delta = self.out(mixed)
        return cost_t + dc.reshape(delta, (h, w, nd))
