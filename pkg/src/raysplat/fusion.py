"""Fusing per-view volumes into one canonical volume.

Each view gets a scalar weight map from a shared scoring head, normalized
by a per-location softmax across views, so fusion is a convex combination.
A zero-initialized conv on the channel-stacked (variance, mean) volumes
adds a residual correction once trained.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, nn
from .features import upsample_bilinear

__all__ = ["CanonicalFusion"]


class CanonicalFusion:
    def __init__(self, store: nn.ParamStore, rng, c_geo: int, c_feat: int,
                 hidden: int = 32, name: str = "fusion"):
        self.c_geo = c_geo
        self.c_feat = c_feat
        self.score1 = nn.Linear(store, f"{name}.score1", c_geo, hidden, rng)
        self.score2 = nn.Linear(store, f"{name}.score2", hidden, 1, rng)
        self.phi_geo = nn.Conv3x3(store, f"{name}.phi_geo", 2 * c_geo, c_geo,
                                  rng, zero_init=True)
        self.phi_feat = nn.Conv3x3(store, f"{name}.phi_feat", 2 * c_feat,
                                   c_feat, rng, zero_init=True)

    def estimate_weights(self, volumes) -> list:
        """Per-view (h, w) maps, softmax-normalized across views."""
        vols = [v if isinstance(v, Tensor) else dc.constant(v)
                for v in volumes]
        h, w, c = vols[0].shape
        scores = []
        for v in vols:
            s = self.score2(dc.gelu(self.score1(dc.reshape(v, (h * w, c)))))
            scores.append(dc.reshape(s, (h, w)))
        wts = dc.softmax(dc.stack(scores), axis=0)
        return [wts[i] for i in range(len(vols))]

    @staticmethod
    def upsample_weights(weights, out_h: int, out_w: int) -> list:
        """Bilinear weight lift; per-location sums stay 1 (affine interp)."""
        out = []
        for wt in weights:
            h, w = wt.shape
            up = upsample_bilinear(dc.reshape(wt, (h, w, 1)), out_h, out_w)
            out.append(dc.reshape(up, (out_h, out_w)))
        return out

    @staticmethod
    def mean_variance(volumes):
        """Per-location mean and biased variance across views."""
        vols = [v if isinstance(v, Tensor) else dc.constant(v)
                for v in volumes]
        m = len(vols)
        mean = vols[0]
        for v in vols[1:]:
            mean = mean + v
        mean = mean * (1.0 / m)
        var = None
        for v in vols:
            d = v - mean
            var = d * d if var is None else var + d * d
        return mean, var * (1.0 / m)

    def _fuse(self, volumes, weights, phi) -> Tensor:
        vols = [v if isinstance(v, Tensor) else dc.constant(v)
                for v in volumes]
        acc = None
        for v, wt in zip(vols, weights):
            term = v * dc.reshape(wt, wt.shape + (1,))
            acc = term if acc is None else acc + term
        mean, var = self.mean_variance(vols)
        return acc + phi(dc.concat([var, mean], axis=-1))

    def fuse(self, volumes, weights) -> Tensor:
        """Weighted sum of refined volumes plus the variance/mean residual."""
        if len(volumes) != len(weights):
            raise ValueError("need one weight map per volume")
        return self._fuse(volumes, weights, self.phi_geo)

    def fuse_features(self, up_features, up_weights) -> Tensor:
        """Same aggregation at full resolution for the feature volume."""
        if len(up_features) != len(up_weights):
            raise ValueError("need one weight map per feature map")
        return self._fuse(up_features, up_weights, self.phi_feat)
