"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: while a Tape is active, every primitive op
appends a node (output, parents, vjp closure) to the tape, so node order is
a topological order by construction. ``Tape.backward`` walks the node list
in reverse, accumulating vector-Jacobian products.

Conventions:
  - all data is float64, NaN/Inf after a forward op raises (see
    ``set_finite_checks``),
  - forward results are deterministic given identical inputs; reductions
    use fixed numpy summation order,
  - with no active tape, ops compute values only (inference mode).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor", "Tape", "tensor", "constant", "param", "active_tape",
    "set_finite_checks", "stop_gradient", "PRIMITIVE_OPS",
    "add", "sub", "mul", "div", "neg", "pow_scalar", "exp", "log", "sqrt",
    "sin", "cos", "tanh", "sigmoid", "softplus", "gelu", "relu",
    "tsum", "tmean", "matmul", "reshape", "transpose", "getitem",
    "concat", "stack", "softmax", "where", "linsolve", "procrustes_rotation",
    "bilinear_sample", "conv3x3", "conv1d_valid", "avg_pool2", "custom_op",
]

_FINITE_CHECKS = True

# Names of every differentiable primitive defined in this module. The
# gradient-integrity suite iterates this set; adding an op without a test
# case makes that suite fail.
PRIMITIVE_OPS: frozenset[str] = frozenset({
    "add", "sub", "mul", "div", "neg", "pow_scalar", "exp", "log", "sqrt",
    "sin", "cos", "tanh", "sigmoid", "softplus", "gelu", "relu",
    "sum", "mean", "softmax", "where", "reshape", "transpose", "getitem",
    "concat", "stack", "matmul", "linsolve", "procrustes_rotation",
    "bilinear_sample", "conv3x3", "conv1d_valid", "avg_pool2",
})


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf validation. Returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


class DiffError(Exception):
    """Raised on autodiff misuse or a non-finite forward result."""


# ---------------------------------------------------------------------------
# Tape and tensor
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Node:
    __slots__ = ("out", "parents", "vjp", "op")

    def __init__(self, out, parents, vjp, op):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _record(self, out, parents, vjp, op):
        out._node_idx = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(out, parents, vjp, op))

    def backward(self, loss: "Tensor", params=None) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Sets ``.grad`` on every reachable leaf with ``requires_grad`` and
        returns a name -> gradient array map for named leaves. If ``params``
        (an iterable of named tensors, or an object with ``.tensors()``) is
        given, parameters that did not participate get zero gradients.
        """
        if loss.data.size != 1:
            raise DiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise DiffError("loss tensor is detached from this tape")

        node_grads: dict[int, np.ndarray] = {
            loss._node_idx: np.ones_like(loss.data)
        }
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            g = node_grads.pop(node.out._node_idx, None)
            if g is None:
                continue
            parent_gs = node.vjp(g)
            for parent, pg in zip(node.parents, parent_gs):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self and parent._node_idx is not None:
                    idx = parent._node_idx
                    if idx in node_grads:
                        node_grads[idx] = node_grads[idx] + pg
                    else:
                        node_grads[idx] = pg
                else:
                    key = id(parent)
                    if key in leaf_grads:
                        leaf_grads[key] = leaf_grads[key] + pg
                    else:
                        leaf_grads[key] = pg
                        leaves[key] = parent

        grad_map: dict[str, np.ndarray] = {}
        for key, t in leaves.items():
            g = np.ascontiguousarray(leaf_grads[key])
            t.grad = g
            if t.name is not None:
                grad_map[t.name] = g
        if params is not None:
            tensors = params.tensors() if hasattr(params, "tensors") else params
            for t in tensors:
                if t.name is not None and t.name not in grad_map:
                    grad_map[t.name] = np.zeros_like(t.data)
                    t.grad = grad_map[t.name]
        return grad_map


class Tensor:
    """A dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "name", "grad", "_tape", "_node_idx")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise DiffError(f"non-finite values in tensor {name or ''}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._tape = None
        self._node_idx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def param(data, name) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def stop_gradient(t: Tensor) -> Tensor:
    """Value of ``t`` detached from the tape."""
    return Tensor(t.data.copy()) if isinstance(t, Tensor) else Tensor(t)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, out_data, parents, vjp) -> Tensor:
    """Create the output tensor of a primitive and record it if needed."""
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise DiffError(f"non-finite result from op '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == np.float64 else out_data.astype(np.float64)
    out.name = None
    out.grad = None
    out._tape = None
    out._node_idx = None
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        tape._record(out, parents, vjp, op)
    return out


def _op(name):
    return name


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(_op("add"), a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(_op("sub"), a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(_op("mul"), a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(_op("div"), a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = _as_tensor(a)
    return _make(_op("neg"), -a.data, (a,), lambda g: (-g,))


def pow_scalar(a, p):
    a = _as_tensor(a)
    p = float(p)
    return _make(_op("pow_scalar"), a.data ** p, (a,),
                 lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make(_op("exp"), out_data, (a,), lambda g: (g * out_data,))


def log(a):
    a = _as_tensor(a)
    return _make(_op("log"), np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(_op("sqrt"), out_data, (a,), lambda g: (g * 0.5 / out_data,))


def sin(a):
    a = _as_tensor(a)
    return _make(_op("sin"), np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = _as_tensor(a)
    return _make(_op("cos"), np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    return _make(_op("tanh"), out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _make(_op("sigmoid"), out_data, (a,),
                 lambda g: (g * out_data * (1.0 - out_data),))


def softplus(a):
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)
    return _make(_op("softplus"), out_data, (a,),
                 lambda g: (g / (1.0 + np.exp(-a.data)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU; smooth everywhere, so finite differences agree."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out_data = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(_op("gelu"), out_data, (a,), vjp)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _make(_op("relu"), np.where(mask, a.data, 0.0), (a,),
                 lambda g: (g * mask,))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(_op("sum"), np.asarray(out_data), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(_op("mean"), np.asarray(out_data), (a,), vjp)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out_data, axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _make(_op("softmax"), out_data, (a,), vjp)


def where(mask, a, b):
    """Select by a constant boolean mask (no gradient flows through mask)."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return _make(_op("where"), np.where(mask, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------

def reshape(a, shape):
    a = _as_tensor(a)
    return _make(_op("reshape"), a.data.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(_op("transpose"), np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def _key_has_arrays(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, key):
    a = _as_tensor(a)
    fancy = _key_has_arrays(key)

    def vjp(g):
        out = np.zeros(a.shape)
        if fancy:
            # unbuffered scatter so repeated indices accumulate
            np.add.at(out, key, g)
        else:
            out[key] += g
        return (out,)

    return _make(_op("getitem"), np.ascontiguousarray(a.data[key]), (a,), vjp)


def concat(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=axis))

    return _make(_op("concat"), np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), vjp)


def stack(parts, axis=0):
    parts = [_as_tensor(p) for p in parts]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.moveaxis(g, axis, 0))

    return _make(_op("stack"), np.stack([p.data for p in parts], axis=axis),
                 tuple(parts), vjp)


# ---------------------------------------------------------------------------
# Linear algebra primitives
# ---------------------------------------------------------------------------

def matmul(a, b):
    """np.matmul semantics for operands with ndim >= 2 (batched allowed)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DiffError("matmul requires ndim >= 2 on both operands")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(_op("matmul"), a.data @ b.data, (a, b), vjp)


def linsolve(a, b):
    """Solve ``a @ x = b`` for square ``a``; differentiable in both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    x = np.linalg.solve(a.data, b.data)

    def vjp(g):
        s = np.linalg.solve(a.data.T, g)
        if x.ndim == 1:
            ga = -np.outer(s, x)
        else:
            ga = -s @ x.T
        return (ga, s)

    return _make(_op("linsolve"), x, (a, b), vjp)


def procrustes_rotation(m):
    """Nearest rotation to a 3x3 matrix: ``R = U diag(1,1,det(UV^T)) V^T``.

    This is the orthogonal Procrustes / Wahba solution for an accumulator
    matrix ``m = sum_l b_l a_l^T`` (it maximizes ``tr(R^T m)`` over SO(3)).
    The backward pass uses the polar-factor differential: with ``P = R^T m``
    (symmetric), the rotation perturbation ``dR = R [w]x`` satisfies
    ``(tr(P) I - P) w = vex(R^T dM - dM^T R)``, which stays well defined even
    for repeated singular values as long as Wahba's problem is non-degenerate.
    """
    m = _as_tensor(m)
    if m.shape != (3, 3):
        raise DiffError("procrustes_rotation expects a 3x3 matrix")
    u, s, vt = np.linalg.svd(m.data)
    d = np.sign(np.linalg.det(u @ vt))
    r = (u * np.array([1.0, 1.0, d])) @ vt

    def vjp(g):
        p = r.T @ m.data
        q = np.trace(p) * np.eye(3) - p
        w = r.T @ g - g.T @ r
        rhs = np.array([w[2, 1], w[0, 2], w[1, 0]])
        y = np.linalg.solve(q, rhs)
        yx = np.array([[0.0, -y[2], y[1]],
                       [y[2], 0.0, -y[0]],
                       [-y[1], y[0], 0.0]])
        return (r @ yx,)

    return _make(_op("procrustes_rotation"), r, (m,), vjp)


# ---------------------------------------------------------------------------
# Grid / image primitives
# ---------------------------------------------------------------------------

def bilinear_sample(feat, coords, mode="zero"):
    """Sample a (H, W, C) feature map at continuous (x, y) locations.

    ``coords`` has shape (..., 2) in feature-grid pixel units. ``mode``:
    "zero" treats out-of-bounds neighbors as zero features, "edge" clamps
    coordinates to the border first. Gradients flow to both the feature map
    and the coordinates (coordinate gradient is zero where "edge" clamps).
    """
    feat, coords = _as_tensor(feat), _as_tensor(coords)
    h, w, c = feat.shape
    xy = coords.data
    x, y = xy[..., 0], xy[..., 1]
    if mode == "edge":
        inside = (x > 0.0) & (x < w - 1.0) & (y > 0.0) & (y < h - 1.0)
        x = np.clip(x, 0.0, w - 1.0)
        y = np.clip(y, 0.0, h - 1.0)
    elif mode != "zero":
        raise DiffError(f"unknown sampling mode {mode!r}")

    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    gathered = []
    valid = []
    idx = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0i + dx
            yi = y0i + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi = np.clip(xi, 0, w - 1)
            yi = np.clip(yi, 0, h - 1)
            gathered.append(feat.data[yi, xi] * ok[..., None])
            valid.append(ok)
            idx.append((yi, xi))
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    weights = (w00, w10, w01, w11)
    out_data = sum(gv * wt[..., None] for gv, wt in zip(gathered, weights))

    def vjp(g):
        gfeat = np.zeros((h, w, c))
        for (yi, xi), ok, wt in zip(idx, valid, weights):
            np.add.at(gfeat, (yi, xi), g * (wt * ok)[..., None])
        # d(out)/dx and d(out)/dy from the interpolation weights
        gdot = [np.sum(g * gv, axis=-1) for gv in gathered]
        gx = (-(1 - fy) * gdot[0] + (1 - fy) * gdot[1] - fy * gdot[2] + fy * gdot[3])
        gy = (-(1 - fx) * gdot[0] - fx * gdot[1] + (1 - fx) * gdot[2] + fx * gdot[3])
        if mode == "edge":
            gx = gx * inside
            gy = gy * inside
        return (gfeat, np.stack([gx, gy], axis=-1))

    return _make(_op("bilinear_sample"), out_data, (feat, coords), vjp)


def conv3x3(x, w, b=None):
    """3x3 same-padding convolution: (H, W, Cin) x (3, 3, Cin, Cout)."""
    x, w = _as_tensor(x), _as_tensor(w)
    h, wid, cin = x.shape
    if w.shape[:3] != (3, 3, cin):
        raise DiffError(f"conv3x3 weight shape {w.shape} mismatches input {x.shape}")
    cout = w.shape[3]
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    out_data = np.zeros((h, wid, cout))
    for ky in range(3):
        for kx in range(3):
            out_data += xp[ky:ky + h, kx:kx + wid] @ w.data[ky, kx]
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data
        parents.append(b)

    def vjp(g):
        gx = np.zeros_like(xp)
        gw = np.zeros((3, 3, cin, cout))
        for ky in range(3):
            for kx in range(3):
                gx[ky:ky + h, kx:kx + wid] += g @ w.data[ky, kx].T
                gw[ky, kx] = np.tensordot(xp[ky:ky + h, kx:kx + wid], g,
                                          axes=([0, 1], [0, 1]))
        grads = [gx[1:h + 1, 1:wid + 1], gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return _make(_op("conv3x3"), out_data, tuple(parents), vjp)


def conv1d_valid(x, kernel, axis):
    """Valid-mode 1-D correlation of a 2-D map with a constant kernel."""
    x = _as_tensor(x)
    k = np.asarray(kernel, dtype=np.float64)
    n = k.size
    moved = np.moveaxis(x.data, axis, -1)
    win = np.lib.stride_tricks.sliding_window_view(moved, n, axis=-1)
    out_data = np.moveaxis(win @ k, -1, axis)

    def vjp(g):
        gm = np.moveaxis(g, axis, -1)
        padded = np.pad(gm, [(0, 0)] * (gm.ndim - 1) + [(n - 1, n - 1)])
        pw = np.lib.stride_tricks.sliding_window_view(padded, n, axis=-1)
        return (np.ascontiguousarray(np.moveaxis(pw @ k[::-1], -1, axis)),)

    return _make(_op("conv1d_valid"), np.ascontiguousarray(out_data), (x,), vjp)


def avg_pool2(x):
    """2x2 average pooling on a (H, W, C) map with even H and W."""
    x = _as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DiffError("avg_pool2 needs even spatial extents")
    out_data = x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25,)

    return _make(_op("avg_pool2"), out_data, (x,), vjp)


def custom_op(name, out_data, parents, vjp):
    """Register an externally implemented differentiable op on the tape.

    ``vjp(g)`` must return one gradient array (or None) per parent. Used by
    modules whose forward/backward are hand-written kernels (the splatting
    renderer); those ops are verified by their own finite-difference suites
    rather than the diffcore primitive sweep.
    """
    parents = tuple(_as_tensor(p) for p in parents)
    return _make(name, np.asarray(out_data, dtype=np.float64), parents, vjp)
