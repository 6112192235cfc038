"""Multi-view feature extraction and joint patch-wise ray prediction.

A shared conv stack takes each view to 1/4 resolution, cross-view attention
mixes information between views, and a small transformer head regresses
per-patch Plücker rays as residuals around the canonical identity ray map.
The canonical view's rays are hard-assigned to that identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .camera import Camera, PlueckerRayMap, camera_to_rays
from .diffcore import Tensor, nn

__all__ = ["FeatureRayNet", "RayPrediction", "FeatureError",
           "upsample_bilinear", "identity_ray_map", "positional_grid"]


class FeatureError(Exception):
    pass


@dataclass
class RayPrediction:
    """Patch-grid Plücker rays as tape tensors, canonical frame."""

    d: Tensor   # (h, w, 3), unit rows
    m: Tensor   # (h, w, 3)

    def to_map(self) -> PlueckerRayMap:
        return PlueckerRayMap(self.d.data.copy(), self.m.data.copy())


def positional_grid(h: int, w: int, c: int) -> np.ndarray:
    """2D sin-cos positional encoding, (h, w, c) with c divisible by 4."""
    if c % 4:
        raise FeatureError("positional channels must divide by 4")
    q = c // 4
    freqs = (1.0 / 10000.0) ** (np.arange(q) / max(q, 1))
    ys = np.arange(h)[:, None] * freqs[None]
    xs = np.arange(w)[:, None] * freqs[None]
    enc_y = np.concatenate([np.sin(ys), np.cos(ys)], axis=-1)   # (h, q*2)
    enc_x = np.concatenate([np.sin(xs), np.cos(xs)], axis=-1)   # (w, q*2)
    out = np.zeros((h, w, c))
    out[..., :2 * q] = enc_y[:, None, :]
    out[..., 2 * q:] = enc_x[None, :, :]
    return out


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of an (h, w, C) tensor to (out_h, out_w, C)."""
    h, w, _ = x.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    xx, yy = np.meshgrid(xs, ys)
    coords = dc.constant(np.stack([xx, yy], axis=-1))
    return dc.bilinear_sample(x, coords, mode="edge")


def identity_ray_map(cam: Camera, gh: int, gw: int) -> PlueckerRayMap:
    """Rays of the identity-pose camera sharing cam's intrinsics."""
    return camera_to_rays(cam.replace_pose(np.eye(3), np.zeros(3)), gh, gw)


class _AttnBlock:
    """Pre-norm cross-attention + MLP, both residual and zero-initialized."""

    def __init__(self, store, name, c, heads, rng):
        self.ln_q = nn.LayerNorm(store, f"{name}.ln_q", c)
        self.ln_kv = nn.LayerNorm(store, f"{name}.ln_kv", c)
        self.xa = nn.CrossAttention(store, f"{name}.xa", c, heads, rng,
                                    zero_out=True)
        self.ln_m = nn.LayerNorm(store, f"{name}.ln_m", c)
        self.mlp = nn.Mlp(store, f"{name}.mlp", c, 2 * c, c, rng, zero_out=True)

    def __call__(self, tokens, kv_tokens):
        tokens = tokens + self.xa(self.ln_q(tokens), self.ln_kv(kv_tokens))
        return tokens + self.mlp(self.ln_m(tokens))


class FeatureRayNet:
    """Shared-weight multi-view backbone with a ray head."""

    def __init__(self, store: nn.ParamStore, rng, channels: int = 64,
                 heads: int = 4, name: str = "featnet"):
        c = channels
        self.channels = c
        self.conv1 = nn.Conv3x3(store, f"{name}.conv1", 3, c // 2, rng)
        self.conv2 = nn.Conv3x3(store, f"{name}.conv2", c // 2, c, rng)
        self.conv3 = nn.Conv3x3(store, f"{name}.conv3", c, c, rng)
        self.view_blocks = [_AttnBlock(store, f"{name}.view{i}", c, heads, rng)
                            for i in range(2)]
        self.up_conv = nn.Conv3x3(store, f"{name}.upconv", c, c, rng)
        self.ray_blocks = [_AttnBlock(store, f"{name}.ray{i}", c, heads, rng)
                           for i in range(2)]
        self.ray_head = nn.Linear(store, f"{name}.ray_head", c, 6, rng,
                                  zero_init=True)

    # -- feature extraction -------------------------------------------------

    def extract_features(self, images) -> list:
        """images: M arrays/tensors (H, W, 3) in [0,1] -> M (H/4, W/4, C)."""
        if len(images) < 2:
            raise FeatureError("need at least 2 views")
        shapes = {tuple(np.shape(im)) for im in images}
        if len(shapes) != 1:
            raise FeatureError(f"mixed image shapes {sorted(shapes)}")
        hh, ww, _ = shapes.pop()
        if hh % 4 or ww % 4:
            raise FeatureError("image sides must divide by 4")

        pe = None
        maps = []
        for im in images:
            x = im if isinstance(im, Tensor) else dc.constant(im)
            x = dc.avg_pool2(dc.gelu(self.conv1(x)))
            x = dc.avg_pool2(dc.gelu(self.conv2(x)))
            x = dc.gelu(self.conv3(x))
            if pe is None:
                h, w, _ = x.shape
                pe = dc.constant(positional_grid(h, w, self.channels))
            maps.append(x + pe)

        h, w, c = maps[0].shape
        tokens = [dc.reshape(fm, (h * w, c)) for fm in maps]
        for block in self.view_blocks:
            # simultaneous update keeps the views symmetric
            kvs = [dc.concat([tokens[j] for j in range(len(tokens)) if j != i])
                   for i in range(len(tokens))]
            tokens = [block(t, kv) for t, kv in zip(tokens, kvs)]
        return [dc.reshape(t, (h, w, c)) for t in tokens]

    def upsample_features(self, fmaps, out_h: int, out_w: int) -> list:
        """Bilinear 4x lift of each map followed by one conv."""
        return [self.up_conv(upsample_bilinear(fm, out_h, out_w))
                for fm in fmaps]

    # -- ray head -----------------------------------------------------------

    def predict_rays(self, fmaps, canon: PlueckerRayMap) -> list:
        """Rays per view; view 0 is fixed to the canonical identity map."""
        h, w, c = fmaps[0].shape
        if canon.d.shape != (h, w, 3):
            raise FeatureError(
                f"canonical ray grid {canon.d.shape} != feature grid {(h, w, 3)}")
        base_d = dc.constant(canon.d)
        base_m = dc.constant(canon.m)
        preds = [RayPrediction(base_d, base_m)]
        canon_tokens = dc.reshape(fmaps[0], (h * w, c))
        for fm in fmaps[1:]:
            t = dc.reshape(fm, (h * w, c))
            for block in self.ray_blocks:
                t = block(t, canon_tokens)
            delta = dc.reshape(self.ray_head(t), (h, w, 6))
            d_raw = base_d + delta[:, :, 0:3]
            m = base_m + delta[:, :, 3:6]
            norm = dc.sqrt(dc.tsum(d_raw * d_raw, axis=-1, keepdims=True)
                           + 1e-18)
            preds.append(RayPrediction(d_raw / norm, m))
        return preds
