"""Parameter store and the small learned blocks used by every head.

Initialization follows two rules: weight matrices get fan-in-scaled uniform
init, and the output projection of any residual block is zero-initialized so
the block starts as the identity map.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv3x3, gelu, param, softmax, sqrt

__all__ = [
    "ParamStore", "Linear", "LayerNorm", "Mlp", "CrossAttention", "Conv3x3",
    "cross_attention", "layer_norm",
]


class ParamStore:
    """Named learnable tensors plus their initialization metadata."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._meta: dict[str, dict] = {}

    def add(self, name: str, data: np.ndarray, scheme: str, seed=None) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = param(np.asarray(data, dtype=np.float64), name)
        self._params[name] = t
        self._meta[name] = {"scheme": scheme, "seed": seed, "shape": list(t.shape)}
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def meta(self, name: str) -> dict:
        return dict(self._meta[name])

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state dict missing parameters: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """y = x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((d_in, d_out))
            scheme = "zeros"
        else:
            w = _fan_in_uniform(rng, (d_in, d_out), d_in)
            scheme = "fan_in_uniform"
        self.w = store.add(f"{name}.w", w, scheme)
        self.b = store.add(f"{name}.b", np.zeros(d_out), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if self.b is not None else y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps=1e-6) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim), "ones")
        self.beta = store.add(f"{name}.beta", np.zeros(dim), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


def cross_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                    return_weights=False):
    """Scaled dot-product attention over token rows.

    q: (Tq, D), k: (Tk, D), v: (Tk, Dv); D and Dv must divide ``heads``.
    Softmax rows over keys sum to one per head.
    """
    tq, d = q.shape
    tk, dk = k.shape
    dv = v.shape[1]
    if d != dk:
        raise ValueError(f"query dim {d} != key dim {dk}")
    if d % heads or dv % heads:
        raise ValueError(f"dims ({d}, {dv}) not divisible by {heads} heads")
    hd = d // heads
    hv = dv // heads
    qh = q.reshape((tq, heads, hd)).transpose((1, 0, 2))
    kh = k.reshape((tk, heads, hd)).transpose((1, 0, 2))
    vh = v.reshape((tk, heads, hv)).transpose((1, 0, 2))
    scores = qh @ kh.transpose((0, 2, 1)) * (1.0 / np.sqrt(hd))
    attn = softmax(scores, axis=-1)
    out = (attn @ vh).transpose((1, 0, 2)).reshape((tq, dv))
    if return_weights:
        return out, attn
    return out


class CrossAttention:
    """Projected multi-head cross-attention block.

    With ``zero_out`` the output projection starts at zero, so a residual
    wrapper ``x + block(x, kv)`` is the identity until the first update.
    """

    def __init__(self, store: ParamStore, name: str, d_model: int, heads: int,
                 rng: np.random.Generator, d_kv=None, zero_out=True):
        d_kv = d_model if d_kv is None else d_kv
        self.heads = heads
        self.wq = Linear(store, f"{name}.wq", d_model, d_model, rng)
        self.wk = Linear(store, f"{name}.wk", d_kv, d_model, rng)
        self.wv = Linear(store, f"{name}.wv", d_kv, d_model, rng)
        self.wo = Linear(store, f"{name}.wo", d_model, d_model, rng, zero_init=zero_out)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor, return_weights=False):
        q = self.wq(q_tokens)
        k = self.wk(kv_tokens)
        v = self.wv(kv_tokens)
        if return_weights:
            mixed, attn = cross_attention(q, k, v, self.heads, return_weights=True)
            return self.wo(mixed), attn
        return self.wo(cross_attention(q, k, v, self.heads))


class Mlp:
    """Two-layer MLP with GELU; output layer optionally zero-initialized."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int,
                 d_out: int, rng: np.random.Generator, zero_out=False):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, d_hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_out, rng,
                          zero_init=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Conv3x3:
    """Same-padding 3x3 convolution stored as (3, 3, Cin, Cout)."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, zero_init=False):
        if zero_init:
            w = np.zeros((3, 3, c_in, c_out))
            scheme = "zeros"
        else:
            w = _fan_in_uniform(rng, (3, 3, c_in, c_out), 9 * c_in)
            scheme = "fan_in_uniform"
        self.w = store.add(f"{name}.w", w, scheme)
        self.b = store.add(f"{name}.b", np.zeros(c_out), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return conv3x3(x, self.w, self.b)
