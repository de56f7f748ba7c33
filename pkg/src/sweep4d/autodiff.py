"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Tape` records every differentiable op in execution order;
``backward`` walks the record once in reverse, so its cost is linear in the
number of recorded ops.  Training accumulators run in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

_ACTIVE_TAPE = None


class Tape:
    """Execution-ordered op record; use as a context manager around a graph."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise NumericError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    @property
    def op_count(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, parents, backward):
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        if _ACTIVE_TAPE is not None:
            _ACTIVE_TAPE.nodes.append(out)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate grads of everything ``loss`` depends on; loss must be scalar."""
    if loss.data.size != 1:
        raise NumericError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise NumericError("loss is detached from every parameter")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _toposort(root: Tensor):
    seen = set()
    order = []
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data)

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so the exponential argument is never positive
    v = x.data
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Tensor(s)

    def bw(g):
        _accum(x, g * s * (1.0 - s))

    return _record(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)

    def bw(g):
        _accum(x, g * (1.0 - t * t))

    return _record(out, (x,), bw)


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """PReLU with a learnable (scalar or broadcastable) negative slope."""
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, alpha.data * x.data))

    def bw(g):
        _accum(x, g * np.where(pos, 1.0, np.broadcast_to(alpha.data, x.data.shape)))
        _accum(alpha, _unbroadcast(g * np.where(pos, 0.0, x.data), alpha.data.shape))

    return _record(out, (x, alpha), bw)


def softmax(x: Tensor, axis=-1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(x, s * (g - dot))

    return _record(out, (x,), bw)


def concat(tensors, axis=-1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _record(out, tuple(tensors), bw)


def index(x: Tensor, key) -> Tensor:
    out = Tensor(x.data[key])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        _accum(x, full)

    return _record(out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _record(out, (x,), bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _record(out, (x,), bw)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.data.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy())

    return _record(out, (x,), bw)


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)

    def bw(g):
        _accum(x, g * 2.0 * x.data)

    return _record(out, (x,), bw)


def absval(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))

    def bw(g):
        _accum(x, g * np.sign(x.data))

    return _record(out, (x,), bw)


def smooth_abs(x: Tensor, eps=1e-6) -> Tensor:
    """sqrt(x^2 + eps^2): differentiable everywhere, used by the TV term."""
    r = np.sqrt(x.data * x.data + eps * eps)
    out = Tensor(r)

    def bw(g):
        _accum(x, g * x.data / r)

    return _record(out, (x,), bw)


def tlog(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def bw(g):
        _accum(x, g / x.data)

    return _record(out, (x,), bw)


def texp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = Tensor(e)

    def bw(g):
        _accum(x, g * e)

    return _record(out, (x,), bw)


def conv1d_z(x: Tensor, kernel: Tensor) -> Tensor:
    """1D correlation along the leading axis with zero padding (same size).

    ``kernel`` is 1D with odd length; used for PSF/TV convolutions along z.
    """
    k = kernel.data
    if k.ndim != 1 or k.size % 2 == 0:
        raise NumericError("conv1d_z kernel must be 1D with odd length")
    r = k.size // 2
    n = x.data.shape[0]
    out_data = np.zeros_like(x.data)
    for i, kv in enumerate(k):
        off = i - r
        lo, hi = max(0, -off), min(n, n - off)
        out_data[lo:hi] += kv * x.data[lo + off:hi + off]
    out = Tensor(out_data)

    def bw(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(k)
        for i, kv in enumerate(k):
            off = i - r
            lo, hi = max(0, -off), min(n, n - off)
            gx[lo + off:hi + off] += kv * g[lo:hi]
            gk[i] = np.sum(g[lo:hi] * x.data[lo + off:hi + off])
        _accum(x, gx)
        _accum(kernel, gk)

    return _record(out, (x, kernel), bw)


def conv3d(x: Tensor, w: Tensor, b: Tensor = None) -> Tensor:
    """3D convolution with 'same' zero padding.

    ``x``: (Ci, nz, ny, nx); ``w``: (Co, Ci, kz, ky, kx) with odd kernel
    dims; optional bias (Co,).  Implemented as shift-and-add over kernel
    offsets, which keeps the gradient exact and the code simple.
    """
    ci, nz, ny, nx = x.data.shape
    co, ci2, kz, ky, kx = w.data.shape
    if ci != ci2 or kz % 2 == 0 or ky % 2 == 0 or kx % 2 == 0:
        raise NumericError("conv3d shape/kernel mismatch")
    rz, ry, rx = kz // 2, ky // 2, kx // 2
    out_data = np.zeros((co, nz, ny, nx))
    offsets = [(dz - rz, dy - ry, dx - rx, dz, dy, dx)
               for dz in range(kz) for dy in range(ky) for dx in range(kx)]

    def _shift_slices(off, n):
        lo, hi = max(0, -off), min(n, n - off)
        return slice(lo, hi), slice(lo + off, hi + off)

    for oz, oy, ox, dz, dy, dx in offsets:
        zs, zs_in = _shift_slices(oz, nz)
        ys, ys_in = _shift_slices(oy, ny)
        xs, xs_in = _shift_slices(ox, nx)
        patch = x.data[:, zs_in, ys_in, xs_in]
        out_data[:, zs, ys, xs] += np.tensordot(
            w.data[:, :, dz, dy, dx], patch, axes=(1, 0)
        )
    if b is not None:
        out_data += b.data[:, None, None, None]
    out = Tensor(out_data)

    def bw(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for oz, oy, ox, dz, dy, dx in offsets:
            zs, zs_in = _shift_slices(oz, nz)
            ys, ys_in = _shift_slices(oy, ny)
            xs, xs_in = _shift_slices(ox, nx)
            gpatch = g[:, zs, ys, xs]
            gx[:, zs_in, ys_in, xs_in] += np.tensordot(
                w.data[:, :, dz, dy, dx].T, gpatch, axes=(1, 0)
            )
            gw[:, :, dz, dy, dx] += np.tensordot(
                gpatch.reshape(co, -1),
                x.data[:, zs_in, ys_in, xs_in].reshape(ci, -1).T,
                axes=(1, 0),
            )
        _accum(x, gx)
        _accum(w, gw)
        if b is not None:
            _accum(b, g.sum(axis=(1, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, bw)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Classic Adam with L2 weight decay added to the gradient."""

    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """One Adam update over a list of parameter Tensors (or bare arrays).

    Bare-array parameters must expose ``.data`` and ``.grad`` attributes;
    :class:`Tensor` qualifies, as does :class:`Param` for numpy-only loops.
    """
    grads = [p.grad for p in params]
    if all(g is None for g in grads):
        raise NumericError("adam_step called with no populated gradients")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / bias1
        v_hat = state.v[i] / bias2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Param:
    """Bare numpy parameter for optimizer loops that bypass the tape."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
