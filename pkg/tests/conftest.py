"""Shared test oracles.

The finite-difference checker here is the independent gradient oracle: it
never touches the reverse-mode machinery it verifies.
"""

import numpy as np
import pytest

from raysplat import diffcore as dc


def finite_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    """Max abs difference, normalized by the largest gradient entry."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / scale


def assert_grads_close(analytic, fd, tol=1e-6, atol=1e-10, label=""):
    """Require ``|analytic - fd| <= tol * scale + atol`` elementwise.

    ``atol`` absorbs central-difference cancellation noise (~eps/h ~ 1e-11),
    which otherwise dominates whenever the true gradient is structurally
    zero (e.g. a key-projection bias under softmax).
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(fd)), 0.0)
    diff = np.max(np.abs(analytic - fd))
    assert diff <= tol * scale + atol, (
        f"{label}: grad gap {diff:.3e} > {tol:g} * {scale:.3e} + {atol:g}")


def check_grads(fn, arrays, tol=1e-6, h=1e-5, seed=0, wrt=None):
    """Compare reverse-mode gradients of ``fn(*tensors)`` against the oracle.

    ``fn`` maps diffcore tensors to one tensor; the loss is a fixed random
    weighting of the output so every component participates. Returns the
    worst relative error over the checked inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    with dc.Tape() as tape:
        ts = [dc.param(a.copy(), f"in{i}") for i, a in enumerate(arrays)]
        out = fn(*ts)
        w = rng.normal(size=out.shape)
        loss = (out * w).sum()
        tape.backward(loss)

    def value_at(idx, a):
        vals = [dc.constant(arr if j != idx else a) for j, arr in enumerate(arrays)]
        return float((fn(*vals).data * w).sum())

    worst = 0.0
    indices = range(len(arrays)) if wrt is None else wrt
    for i in indices:
        fd = finite_diff(lambda a, i=i: value_at(i, a), arrays[i].copy(), h=h)
        assert_grads_close(ts[i].grad, fd, tol=tol, label=f"input {i}")
        worst = max(worst, rel_err(ts[i].grad, fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
