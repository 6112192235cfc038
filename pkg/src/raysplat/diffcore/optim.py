"""Adam optimizer over a ParamStore."""

from __future__ import annotations

import numpy as np

from .nn import ParamStore

__all__ = ["Adam", "OptimError"]


class OptimError(Exception):
    pass


class Adam:
    """Standard Adam with bias correction.

    The step validates every gradient before touching any state, so a NaN
    gradient aborts atomically and names the offending parameter.
    """

    def __init__(self, store: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(store[name].data) for name in store.names()}
        self.v = {name: np.zeros_like(store[name].data) for name in store.names()}

    def step(self, grads: dict[str, np.ndarray]):
        for name in self.store.names():
            g = grads.get(name)
            if g is not None and not np.all(np.isfinite(g)):
                raise OptimError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.store.names():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(self.store[name].data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            self.store[name].data = self.store[name].data - update

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).copy()
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).copy()
