"""Minimal dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, float64 for
gradient verification).  Every differentiable operation records its parents
and a vector-Jacobian closure; ``backward`` replays the tape in reverse
creation order, which keeps gradient accumulation deterministic.

Layout conventions: image-like data is B x C x H x W, token sequences are
B x N x C.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """An operation was configured inconsistently (e.g. empty conv output)."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (non-scalar backward, double backward)."""


_GELU_C = 0.044715
_GELU_S = float(np.sqrt(2.0 / np.pi))

_grad_enabled = True
_nan_check = False


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / init)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def nan_check():
    """Raise if any op inside the block produces a NaN/Inf output."""
    global _nan_check
    prev = _nan_check
    _nan_check = True
    try:
        yield
    finally:
        _nan_check = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return np.ascontiguousarray(arr)


class Tensor:
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _vjp: Optional[Callable] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._vjp = _vjp
        self._nid = next(Tensor._ids)
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _nan_check and not np.isfinite(data).all():
        raise FloatingPointError("non-finite values produced by an operation")
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _ensure(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Accumulation follows fixed reverse-creation order, so repeated runs are
    bit-identical.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise GraphError("backward called twice on the same graph without a new forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node._nid in visited:
            continue
        visited.add(node._nid)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._nid not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {loss._nid: np.ones_like(loss.data)}
    for node in sorted(topo, key=lambda t: t._nid, reverse=True):
        g = grads.pop(node._nid, None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._nid in grads:
                grads[p._nid] = grads[p._nid] + pg
            else:
                grads[p._nid] = pg
    loss._backward_done = True


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, like=a)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, like=a)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    x = a.data
    u = _GELU_S * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_S * (1.0 + 3.0 * _GELU_C * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _node(out, (a,), vjp)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        gs = g * out
        return (gs - out * gs.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# structural ops

def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.shape
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return _node(out, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_ensure(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(parts), vjp)


def pad2d(a: Tensor, pad: int, mode: str = "constant") -> Tensor:
    """Pad the last two axes symmetrically by ``pad`` pixels."""
    if pad == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width, mode=mode)
    if mode != "constant":
        # reflect-pad is only used on non-tracked inputs (model image padding)
        if a.requires_grad and _grad_enabled:
            raise GraphError("non-constant pad2d is not differentiable")
        return Tensor(out)

    def vjp(g):
        sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
        return (g[sl],)

    return _node(out, (a,), vjp)


def pad_bottom_right(a: Tensor, ph: int, pw: int) -> Tensor:
    """Zero-pad the last two axes at their high ends (divisibility alignment)."""
    if ph == 0 and pw == 0:
        return a
    width = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    out = np.pad(a.data, width)
    h, w = a.shape[-2], a.shape[-1]

    def vjp(g):
        return (g[..., :h, :w],)

    return _node(out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _ensure(a)
    b = _ensure(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear expects last dim {w.shape[0]}, got {x.shape}")
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1,
               eps: float = 1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``, then affine.

    gamma/beta must broadcast against x with the normalized extent on ``axis``.
    """
    mu = tmean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = tmean(mul(xc, xc), axis=axis, keepdims=True)
    xn = div(xc, tsqrt(add(var, eps)))
    return add(mul(xn, gamma), beta)


# ---------------------------------------------------------------------------
# convolution family

def _conv_out_extent(h: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (h + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int, dil: int):
    """Return windows of shape B,C,Ho,Wo,kh,kw (a strided view where possible)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ekh = dil * (kh - 1) + 1
    ekw = dil * (kw - 1) + 1
    win = sliding_window_view(x, (ekh, ekw), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dil, ::dil]


def _col2im(gcols: np.ndarray, xshape: tuple, kh: int, kw: int,
            stride: int, pad: int, dil: int) -> np.ndarray:
    """Scatter-add window gradients (B,C,Ho,Wo,kh,kw) back onto the input."""
    b, c, h, w = xshape
    ho, wo = gcols.shape[2], gcols.shape[3]
    gx = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i * dil: i * dil + stride * ho: stride,
               j * dil: j * dil + stride * wo: stride] += gcols[..., i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2D cross-correlation. x: B,Cin,H,W; w: Cout,Cin/groups,Kh,Kw."""
    bsz, cin, h, wdt = x.shape
    cout, cin_g, kh, kw = w.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ShapeError(f"kernel expects {cin_g} in-channels per group, input has {cin // groups}")
    ho = _conv_out_extent(h, kh, stride, padding, dilation)
    wo = _conv_out_extent(wdt, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output extent {ho}x{wo} is empty for input {h}x{wdt}")

    cg, og = cin // groups, cout // groups
    cols = _im2col(x.data, kh, kw, stride, padding, dilation)
    # contiguous (groups, B*Ho*Wo, Cg*kh*kw) so the products hit BLAS
    cols_m = np.ascontiguousarray(
        cols.reshape(bsz, groups, cg, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6)
    ).reshape(groups, bsz * ho * wo, cg * kh * kw)
    w_m = w.data.reshape(groups, og, cg * kh * kw)
    out = np.matmul(cols_m, w_m.swapaxes(1, 2))          # g, BHW, og
    out = out.reshape(groups, bsz, ho, wo, og).transpose(1, 0, 4, 2, 3)
    out = np.ascontiguousarray(out.reshape(bsz, cout, ho, wo))
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g_m = np.ascontiguousarray(
            g.reshape(bsz, groups, og, ho, wo).transpose(1, 0, 3, 4, 2)
        ).reshape(groups, bsz * ho * wo, og)
        gw = np.matmul(g_m.swapaxes(1, 2), cols_m).reshape(w.shape)
        gcols_m = np.matmul(g_m, w_m)                    # g, BHW, Cg*kh*kw
        gcols = gcols_m.reshape(groups, bsz, ho, wo, cg, kh, kw)
        gcols = np.ascontiguousarray(gcols.transpose(1, 0, 4, 2, 3, 5, 6))
        gcols = gcols.reshape(bsz, cin, ho, wo, kh, kw)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding, dilation)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, vjp)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2D convolution. x: B,Cin,H,W; w: Cin,Cout,Kh,Kw."""
    bsz, cin, h, wdt = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin_w != cin:
        raise ShapeError(f"conv_transpose2d expects {cin_w} in-channels, got {cin}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wdt - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv_transpose2d output extent {ho}x{wo} is empty")

    x_m = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(bsz * h * wdt, cin)
    w_m = w.data.reshape(cin, cout * kh * kw)
    gcols = (x_m @ w_m).reshape(bsz, h, wdt, cout, kh, kw)
    gcols = np.ascontiguousarray(gcols.transpose(0, 3, 1, 2, 4, 5))
    out = _col2im(gcols, (bsz, cout, ho, wo), kh, kw, stride, padding, dil=1)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        win = _im2col(g, kh, kw, stride, padding, dil=1)  # B,Cout,H,W,kh,kw
        win_m = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
        win_m = win_m.reshape(bsz * h * wdt, cout * kh * kw)
        gx = (win_m @ w_m.T).reshape(bsz, h, wdt, cin).transpose(0, 3, 1, 2)
        gw = (x_m.T @ win_m).reshape(w.shape)
        if b is None:
            return np.ascontiguousarray(gx), gw
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return _node(out, parents, vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: B,C,H,W -> B,C,1,1."""
    return tmean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# resizing

def _resize_axis_weights(n_in: int, n_out: int, dtype):
    """align_corners=False source indices and lerp weights for one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    return i0c, i1c, frac.astype(dtype)


def bilinear_resize_array(x: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Bilinear resize (align_corners=False) of the last two axes."""
    h, w = x.shape[-2], x.shape[-1]
    i0, i1, fh = _resize_axis_weights(h, h2, x.dtype)
    j0, j1, fw = _resize_axis_weights(w, w2, x.dtype)
    top = x[..., i0, :] * (1 - fh)[:, None] + x[..., i1, :] * fh[:, None]
    return top[..., j0] * (1 - fw) + top[..., j1] * fw


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    """Differentiable bilinear resize of B,C,H,W to B,C,h2,w2."""
    if h2 < 1 or w2 < 1:
        raise ConfigError(f"bilinear_resize target {h2}x{w2} is invalid")
    h, w = x.shape[-2], x.shape[-1]
    out = bilinear_resize_array(x.data, h2, w2)

    i0, i1, fh = _resize_axis_weights(h, h2, x.data.dtype)
    j0, j1, fw = _resize_axis_weights(w, w2, x.data.dtype)

    def vjp(g):
        gx = np.zeros_like(x.data)
        lead = x.shape[:-2]
        gxf = gx.reshape(-1, h, w)
        gf = g.reshape(-1, h2, w2)
        bidx = np.arange(gxf.shape[0])[:, None, None]
        for ii, wi in ((i0, 1 - fh), (i1, fh)):
            for jj, wj in ((j0, 1 - fw), (j1, fw)):
                np.add.at(gxf, (bidx, ii[None, :, None], jj[None, None, :]),
                          gf * wi[:, None] * wj)
        return (gxf.reshape(lead + (h, w)),)

    return _node(out, (x,), vjp)
