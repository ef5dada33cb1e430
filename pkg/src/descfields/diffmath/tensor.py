"""Minimal dense f32 tensor library with reverse-mode gradients.

A Tape records ops in execution order; backward walks the record once in
reverse (execution order is a topological order by construction).  Only the
ops the descriptor-field pipeline needs exist, with hand-written adjoints;
the conv / trilinear hot paths dispatch to the selected kernel backend.

Forward data is float32 throughout.  Trilinear coordinates cross the
geometry/network boundary in float64 and are cast inside the kernels, so
query paths that agree in f64 produce bitwise-identical descriptors.
"""

from __future__ import annotations

import numpy as np

from . import backend

_DEBUG_FINITE = False


def set_debug(flag: bool) -> None:
    """Enable per-op finiteness checks (slow; used in tests)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


class Tensor:
    """f32 by default; f64 input data keeps its dtype so finite-difference
    probes of the pure-NumPy ops can run at full precision.  The compiled
    kernel ops (conv3d, gather, scatter) always compute in f32."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        dt = np.float64 if arr.dtype == np.float64 else np.float32
        arr = arr.astype(dt, copy=False)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # small conveniences; heavy lifting stays in the module functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class _Node:
    __slots__ = ("out", "fn")

    def __init__(self, out, fn):
        self.out = out
        self.fn = fn


class Tape:
    """Single-owner op recording; backward visits nodes once, in reverse."""

    _active = None

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        if Tape._active is not None:
            raise RuntimeError("a Tape is already recording; tapes cannot nest")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ValueError("backward root must be a scalar")
        if not np.isfinite(root.data).all():
            raise FloatingPointError("non-finite loss")
        root.grad = np.ones_like(root.data)
        for node in reversed(self._nodes):
            if node.out.grad is not None:
                node.fn(node.out.grad)


def _record(out: Tensor, parents, fn) -> Tensor:
    if _DEBUG_FINITE and not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite op output")
    tape = Tape._active
    if tape is not None and any(p.requires_grad for p in parents if isinstance(p, Tensor)):
        out.requires_grad = True
        tape._nodes.append(_Node(out, fn))
    return out


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g).astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, -_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), fn)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        s = a.data.dtype.type(b)
        out = Tensor(a.data * s)

        def fn_scalar(g):
            _accum(a, g * s)

        return _record(out, (a,), fn_scalar)
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def fn(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def fn(g):
        _accum(a, -g)

    return _record(out, (a,), fn)


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data))

    def fn(g):
        _accum(a, g * np.sign(a.data))

    return _record(out, (a,), fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def fn(g):
        _accum(a, g * (a.data > 0))

    return _record(out, (a,), fn)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    root = np.sqrt(a.data)
    out = Tensor(root)

    def fn(g):
        _accum(a, g * 0.5 / np.maximum(root, 1e-12))

    return _record(out, (a,), fn)


def square(a) -> Tensor:
    return mul(a, a)


# --- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def fn(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), fn)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _record(out, tuple(tensors), fn)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def fn(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _record(out, (a,), fn)


def mean_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


# --- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data @ b.data)

    def fn(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), fn)


def linear(x, w, b) -> Tensor:
    """x [m,k] @ w [k,n] + b [n]."""
    return add(matmul(x, w), b)


# --- network-specific ops -----------------------------------------------------


def conv3d(x, w, b) -> Tensor:
    """3x3x3 stride-1 zero-pad convolution, channels last.

    x [D,H,W,Ci], w [27,Ci,Co] (tap index k = (dz+1)*9 + (dy+1)*3 + (dx+1)),
    b [Co] -> [D,H,W,Co].
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    kern = backend.active
    out = Tensor(kern.conv3d_fwd(x.data, w.data, b.data))

    def fn(g):
        g = np.ascontiguousarray(g, np.float32)
        if x.requires_grad:
            wf = np.ascontiguousarray(w.data[::-1].transpose(0, 2, 1))
            zeros = np.zeros(x.data.shape[3], np.float32)
            _accum(x, kern.conv3d_fwd(g, wf, zeros))
        if w.requires_grad or b.requires_grad:
            gw, gb = kern.conv3d_bwd_weights(x.data, g)
            _accum(w, gw)
            _accum(b, gb)

    return _record(out, (x, w, b), fn)


def scatter_mean(feat, idx: np.ndarray, n_cells: int):
    """Mean-pool point features into cells; returns (Tensor [n_cells,F], counts)."""
    feat = _as_tensor(feat)
    kern = backend.active
    mean, count = kern.scatter_mean_fwd(np.asarray(idx, np.int64), feat.data, n_cells)
    out = Tensor(mean)

    def fn(g):
        _accum(feat, kern.scatter_mean_bwd(np.asarray(idx, np.int64), count, g))

    return _record(out, (feat,), fn), count


def gather(vol, coords, mode: str = "trilinear") -> Tensor:
    """Interpolate a [D,H,W,C] volume at coords given in voxel-center units.

    coords may be a constant f64 array or a Tensor (pose-optimization path);
    gradients flow to the volume and, for trilinear mode, to the coords.
    Out-of-support coordinates are clamped; their coordinate grad is zero.
    """
    vol = _as_tensor(vol)
    kern = backend.active
    coords_t = coords if isinstance(coords, Tensor) else None
    u = coords.data.astype(np.float64) if coords_t is not None else np.asarray(coords, np.float64)
    if mode == "trilinear":
        out = Tensor(kern.trilinear_fwd(vol.data, u))
    elif mode == "floor":
        out = Tensor(kern.nearest_fwd(vol.data, u))
    else:
        raise ValueError(f"unknown gather mode {mode!r}")

    def fn(g):
        g = np.ascontiguousarray(g, np.float32)
        if mode == "trilinear":
            gvol, gc = kern.trilinear_bwd(vol.data, u, g)
            _accum(vol, gvol)
            if coords_t is not None:
                _accum(coords_t, gc)
        else:
            _accum(vol, kern.nearest_bwd_vol(vol.data, u, g))

    parents = (vol,) if coords_t is None else (vol, coords_t)
    return _record(out, parents, fn)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """Row-wise cosine similarity; a may have a single broadcast row.

    Denominator is guarded with max(|a||b|, eps) so degenerate descriptors
    produce 0-ish similarity instead of NaN.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad = a.data.astype(np.float64)
    bd = b.data.astype(np.float64)
    dots = np.einsum("id,id->i", np.broadcast_to(ad, bd.shape), bd)
    na = np.linalg.norm(ad, axis=1)
    nb = np.linalg.norm(bd, axis=1)
    prod = np.broadcast_to(na, nb.shape) * nb
    denom = np.maximum(prod, eps)
    s = dots / denom
    out = Tensor(s.astype(np.result_type(a.data, b.data)))

    def fn(g):
        g64 = g.astype(np.float64)
        free = (prod > eps).astype(np.float64)  # where the guard is inactive
        abf = np.broadcast_to(ad, bd.shape)
        naf = np.maximum(np.broadcast_to(na, nb.shape), 1e-30)
        nbf = np.maximum(nb, 1e-30)
        ga = (bd / denom[:, None] - (free * s / naf**2)[:, None] * abf) * g64[:, None]
        gb = (abf / denom[:, None] - (free * s / nbf**2)[:, None] * bd) * g64[:, None]
        _accum(a, _unbroadcast(ga, a.data.shape).astype(np.float32))
        _accum(b, gb.astype(np.float32))

    return _record(out, (a, b), fn)


def bce_with_logits(logits, labels) -> Tensor:
    """Elementwise stable binary cross entropy; labels are constants."""
    logits = _as_tensor(logits)
    y = np.asarray(labels, np.float32).reshape(logits.data.shape)
    x = logits.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(loss)

    def fn(g):
        sig = 1.0 / (1.0 + np.exp(-x.astype(np.float64)))
        _accum(logits, (g * (sig - y)).astype(np.float32))

    return _record(out, (logits,), fn)


def quat_rotate(q, t, points: np.ndarray) -> Tensor:
    """Apply S rigid transforms to a fixed point set.

    q [S,4] quaternions (normalized in-graph), t [S,3], points [Nq,3]
    constant -> [S*Nq, 3] start-major.  This is the differentiable bridge
    from pose parameters to query-point coordinates.
    """
    q, t = _as_tensor(q), _as_tensor(t)
    X = np.asarray(points, np.float32)
    s_count, nq = q.data.shape[0], X.shape[0]
    qn64 = q.data.astype(np.float64)
    norms = np.linalg.norm(qn64, axis=1, keepdims=True)
    u = qn64 / norms
    w, v = u[:, 0], u[:, 1:]
    X64 = X.astype(np.float64)
    dotvx = v @ X64.T  # [S,Nq]
    cross = np.cross(v[:, None, :], X64[None, :, :])  # [S,Nq,3]
    coef = (w * w - np.einsum("sk,sk->s", v, v))[:, None, None]
    y = coef * X64[None] + 2.0 * dotvx[:, :, None] * v[:, None, :] + 2.0 * w[:, None, None] * cross
    y = y + t.data.astype(np.float64)[:, None, :]
    out = Tensor(y.reshape(s_count * nq, 3).astype(np.result_type(q.data, t.data)))

    def fn(g):
        G = g.astype(np.float64).reshape(s_count, nq, 3)
        _accum(t, G.sum(axis=1).astype(np.float32))
        if q.requires_grad:
            xg = np.einsum("nk,snk->sn", X64, G)  # X . G
            vg = np.einsum("sk,snk->sn", v, G)  # v . G
            gw = 2.0 * w * xg.sum(axis=1) + 2.0 * np.einsum("snk,snk->s", cross, G)
            gv = (
                -2.0 * xg.sum(axis=1)[:, None] * v
                + 2.0 * np.einsum("sn,nk->sk", vg, X64)
                + 2.0 * np.einsum("sn,snk->sk", dotvx, G)
                + 2.0 * w[:, None] * np.einsum("snk->sk", np.cross(X64[None, :, :], G))
            )
            gu = np.concatenate([gw[:, None], gv], axis=1)
            # chain through normalization u = q/|q|
            gq = (gu - u * np.einsum("sk,sk->s", gu, u)[:, None]) / norms
            _accum(q, gq.astype(np.float32))

    return _record(out, (q, t), fn)
