"""Dense arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every op that touches a tensor with
``requires_grad`` records a node (parents + backward closure); calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order. Graphs are rebuilt on every forward call.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_DEBUG_NANS = False


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def set_debug(flag: bool) -> None:
    """Raise ``FloatingPointError`` as soon as any op produces NaN/Inf."""
    global _DEBUG_NANS
    _DEBUG_NANS = bool(flag)


@contextlib.contextmanager
def debug_nans(flag: bool = True):
    old = _DEBUG_NANS
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._released = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def has_nonfinite(self) -> bool:
        return not bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None, create_graph: bool = False) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        if create_graph:
            raise NotImplementedError("higher-order derivatives are not supported")
        if self.data.size != 1 and grad is None:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise RuntimeError("graph was already consumed by an earlier backward(); "
                               "re-run the forward pass")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor requiring grad")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data) if grad is None
                 else np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._released = True
            node._backward = None
            node._parents = ()


def _raise_item(shape):
    raise ValueError(f"item() needs a single element, got shape {shape}")


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check(out: np.ndarray, op: str) -> None:
    if _DEBUG_NANS and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._released = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _shape_error(op: str, a, b) -> ValueError:
    return ValueError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)
    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)
    return _make(x * cdf, (a,), bw, "gelu")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise _shape_error("matmul", ad.shape, bd.shape)
    if ad.ndim == 1 or bd.ndim == 1:
        raise ValueError("matmul: promote vectors to 2-D explicitly")
    out = ad @ bd

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return _make(out, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` as a single graph node."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise _shape_error("linear", xd.shape, wd.shape)
    out = xd @ wd
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents = (x, w, b)

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)
    return _make(out, parents, bw, "linear")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit output (no ellipsis)."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    if "." in subscripts:
        raise ValueError("einsum: ellipsis is not supported")
    for s, other in ((sa, sb + out_s), (sb, sa + out_s)):
        if any(c not in other for c in s):
            raise ValueError(f"einsum: index of '{s}' summed without partner in '{subscripts}'")
    ad, bd = a.data, b.data
    try:
        out = np.einsum(subscripts, ad, bd, optimize=True)
    except ValueError as exc:
        raise ValueError(f"einsum '{subscripts}': incompatible shapes {ad.shape} and {bd.shape}") from exc

    def bw(g):
        return (np.einsum(f"{out_s},{sb}->{sa}", g, bd, optimize=True),
                np.einsum(f"{out_s},{sa}->{sb}", g, ad, optimize=True))
    return _make(out, (a, b), bw, "einsum")


def edge_messages(h, v, w, b) -> Tensor:
    """Per-edge ``kappa(e) v(e)`` with ``kappa = reshape(h W + b, (c_in, c_out))``.

    ``h`` is (..., E, H) hidden edge activations, ``v`` (..., E, c_in),
    ``w`` (H, c_in * c_out) and ``b`` (c_in * c_out,). Leading axes of ``h``
    broadcast against those of ``v``. The kernel matrices are never formed.
    """
    h, v, w, b = as_tensor(h), as_tensor(v), as_tensor(w), as_tensor(b)
    hd, vd = h.data, v.data
    nh, ci = hd.shape[-1], vd.shape[-1]
    if w.shape[0] != nh or w.shape[1] % ci or b.shape != (w.shape[1],) or hd.shape[-2] != vd.shape[-2]:
        raise ValueError(f"edge_messages: incompatible shapes h{hd.shape} v{vd.shape} "
                         f"w{w.shape} b{b.shape}")
    co = w.shape[1] // ci
    wt = w.data.reshape(nh, ci, co).transpose(1, 0, 2).reshape(ci, nh * co)
    bm = b.data.reshape(ci, co)
    lead = vd.shape[:-1]
    vw = (vd @ wt).reshape(lead + (nh, co))
    out = np.einsum("...eh,...eho->...eo", hd, vw) + vd @ bm

    def bw(g):
        gvw = np.einsum("...eh,...eo->...eho", hd, g)
        gh = _unbroadcast(np.einsum("...eho,...eo->...eh", vw, g), hd.shape)
        gv = gvw.reshape(lead + (nh * co,)) @ wt.T + g @ bm.T
        vf = vd.reshape(-1, ci)
        gwt = vf.T @ gvw.reshape(-1, nh * co)
        gw = gwt.reshape(ci, nh, co).transpose(1, 0, 2).reshape(nh, ci * co)
        gb = (vf.T @ g.reshape(-1, co)).reshape(-1)
        return gh, gv, gw, gb
    return _make(out, (h, v, w, b), bw, "edge_messages")


def axis_apply(x, mat: np.ndarray, axis: int) -> Tensor:
    """Apply a constant matrix along one axis: ``out[..., i, ...] = sum_j mat[i, j] x[..., j, ...]``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] != mat.shape[1]:
        raise _shape_error("axis_apply", x.shape, mat.shape)
    mat = np.asarray(mat, dtype=x.dtype)
    last = x.ndim - 1
    if axis == last:
        out = x.data @ mat.T
    else:
        out = np.swapaxes(np.swapaxes(x.data, axis, last) @ mat.T, axis, last)

    def bw(g):
        if axis == last:
            return (g @ mat,)
        return (np.swapaxes(np.swapaxes(g, axis, last) @ mat, axis, last),)
    return _make(out, (x,), bw, "axis_apply")


def sparse_apply(mat, x) -> Tensor:
    """Multiply a constant scipy sparse matrix into the second-to-last axis of ``x``.

    ``x`` has shape ``(..., n, c)``; the result has shape ``(..., m, c)``.
    Used for neighbour gathers and weighted segment sums.
    """
    x = as_tensor(x)
    xd = x.data
    n, c = xd.shape[-2], xd.shape[-1]
    if mat.shape[1] != n:
        raise _shape_error("sparse_apply", mat.shape, xd.shape)
    lead = xd.shape[:-2]
    m = mat.shape[0]
    if not lead:
        out = np.asarray(mat @ xd)
    else:
        flat = np.moveaxis(xd.reshape(-1, n, c), 0, 1).reshape(n, -1)
        res = mat @ flat
        out = np.moveaxis(np.asarray(res).reshape(m, -1, c), 1, 0).reshape(lead + (m, c))

    def bw(g):
        matT = _sparse_transpose(mat)
        if not lead:
            return (np.asarray(matT @ g),)
        gf = np.moveaxis(g.reshape(-1, m, c), 0, 1).reshape(m, -1)
        r = np.asarray(matT @ gf)
        return (np.moveaxis(r.reshape(n, -1, c), 1, 0).reshape(lead + (n, c)),)
    return _make(out, (x,), bw, "sparse_apply")


def _sparse_transpose(mat):
    # graph matrices are constant, so their transposes are built once
    t = getattr(mat, "_gwf_transpose", None)
    if t is None:
        t = mat.T.tocsr()
        try:
            mat._gwf_transpose = t
        except AttributeError:
            pass
    return t


# -- shape ops -------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)
    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError("stack: incompatible shapes " + ", ".join(str(t.shape) for t in ts)) from None
    n = len(ts)

    def bw(g):
        return tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis))
    return _make(out, ts, bw, "stack")


def pad(a, widths) -> Tensor:
    a = as_tensor(a)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad")


# -- reductions --------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), bw, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    d = xd.shape[-1]
    rd = 1.0 / d
    xc = xd - np.add.reduce(xd, axis=-1, keepdims=True) * rd
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * rd
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - np.add.reduce(gx_hat, axis=-1, keepdims=True) * rd
                    - xhat * (np.add.reduce(gx_hat * xhat, axis=-1, keepdims=True) * rd))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)
    return _make(out, (x, gamma, beta), bw, "layer_norm")


# -- attention ---------------------------------------------------------------

def attention_core(q, k, v, heads: int = 1, causal: bool = False, weights_out: list | None = None) -> Tensor:
    """Fused multi-head ``softmax(QK^T / sqrt(d_head)) V``.

    ``q`` is (n_q, d), ``k`` and ``v`` are (n_k, d). Heads split the last axis.
    With ``causal`` the query ``i`` only attends to keys ``j <= i``.
    When ``weights_out`` is a list the (heads, n_q, n_k) weights are appended.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    nq, d = q.shape
    nk = k.shape[0]
    if k.shape[1] != d:
        raise _shape_error("attention (q vs k)", q.shape, k.shape)
    if v.shape[0] != nk:
        raise _shape_error("attention (k vs v)", k.shape, v.shape)
    if d % heads or v.shape[1] % heads:
        raise ValueError(f"attention: width {d} not divisible by {heads} heads")
    dh, dv = d // heads, v.shape[1] // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(nk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nk, heads, dv).transpose(1, 0, 2)
    s = (qh @ kh.transpose(0, 2, 1)) * scale
    if causal:
        s = np.where(np.triu(np.ones((nq, nk), dtype=bool), k=1), -np.inf, s)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    a = e / e.sum(axis=-1, keepdims=True)
    if weights_out is not None:
        weights_out.append(a)
    out = (a @ vh).transpose(1, 0, 2).reshape(nq, heads * dv)

    def bw(g):
        goh = g.reshape(nq, heads, dv).transpose(1, 0, 2)
        ga = goh @ vh.transpose(0, 2, 1)
        gv = a.transpose(0, 2, 1) @ goh
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh
        return (gq.transpose(1, 0, 2).reshape(nq, d),
                gk.transpose(1, 0, 2).reshape(nk, d),
                gv.transpose(1, 0, 2).reshape(nk, heads * dv))
    return _make(out, (q, k, v), bw, "attention")


# -- 3D convolution ------------------------------------------------------------

def _triple(v) -> tuple:
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def _pad5(x, p):
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def _conv3d_windows(x, ksize, stride):
    win = sliding_window_view(x, ksize, axis=(2, 3, 4))
    return win[:, :, ::stride[0], ::stride[1], ::stride[2]]


def _conv3d_np(x, w, stride, padding):
    xp = _pad5(x, padding)
    win = _conv3d_windows(xp, w.shape[2:], stride)
    out = np.tensordot(win, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _conv3d_adjoint_np(g, w, stride, padding, in_spatial):
    """Transpose of :func:`_conv3d_np` w.r.t. its input."""
    b = g.shape[0]
    c = w.shape[1]
    k = w.shape[2:]
    padded = tuple(n + 2 * p for n, p in zip(in_spatial, padding))
    gx = np.zeros((b, c) + padded, dtype=g.dtype)
    cols = np.tensordot(g, w, axes=([1], [0]))  # (B, Do, Ho, Wo, C, k1, k2, k3)
    do, ho, wo = g.shape[2:]
    for i, j, l in itertools.product(range(k[0]), range(k[1]), range(k[2])):
        gx[:, :, i:i + stride[0] * (do - 1) + 1:stride[0],
              j:j + stride[1] * (ho - 1) + 1:stride[1],
              l:l + stride[2] * (wo - 1) + 1:stride[2]] += cols[..., i, j, l].transpose(0, 4, 1, 2, 3)
    p = padding
    return gx[:, :, p[0]:p[0] + in_spatial[0], p[1]:p[1] + in_spatial[1], p[2]:p[2] + in_spatial[2]]


def _conv3d_wgrad_np(x, g, ksize, stride, padding):
    xp = _pad5(x, padding)
    win = _conv3d_windows(xp, ksize, stride)
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def conv3d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (B, C, D, H, W) with ``w`` (O, C, k1, k2, k3)."""
    x, w = as_tensor(x), as_tensor(w)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv3d", x.shape, w.shape)
    for n, p, kk in zip(x.shape[2:], padding, w.shape[2:]):
        if n + 2 * p < kk:
            raise _shape_error("conv3d (kernel larger than input)", x.shape, w.shape)
    xd, wd = x.data, w.data
    out = _conv3d_np(xd, wd, stride, padding)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1, 1)
        parents = (x, w, b)

    def bw(g):
        gx = _conv3d_adjoint_np(g, wd, stride, padding, xd.shape[2:])
        gw = _conv3d_wgrad_np(xd, g, wd.shape[2:], stride, padding)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))
    return _make(out, parents, bw, "conv3d")


def conv3d_transpose(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv3d`; ``w`` is (C_in, C_out, k1, k2, k3)."""
    x, w = as_tensor(x), as_tensor(w)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise _shape_error("conv3d_transpose", x.shape, w.shape)
    xd, wd = x.data, w.data
    out_spatial = tuple((n - 1) * s - 2 * p + kk
                        for n, s, p, kk in zip(xd.shape[2:], stride, padding, wd.shape[2:]))
    if min(out_spatial) < 1:
        raise _shape_error("conv3d_transpose (empty output)", x.shape, w.shape)
    out = _conv3d_adjoint_np(xd, wd, stride, padding, out_spatial)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, -1, 1, 1, 1)
        parents = (x, w, b)

    def bw(g):
        gx = _conv3d_np(g, wd, stride, padding)
        gw = _conv3d_wgrad_np(g, xd, wd.shape[2:], stride, padding)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3, 4))
    return _make(out, parents, bw, "conv3d_transpose")


# -- parameters and modules -----------------------------------------------------

def uniform_init(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Minimal container: attributes holding grad-requiring tensors are parameters."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


# -- gradient checking -----------------------------------------------------------

def finite_diff_check(f: Callable, x: Tensor, eps: float = 1e-6, seed: int = 0,
                      wrt: Iterable[Tensor] | None = None, max_coords: int | None = None) -> float:
    """Largest relative discrepancy between autodiff and central differences.

    Tensor-valued ``f`` is reduced to a scalar by a fixed random projection.
    Per coordinate the error is ``|analytic - numeric| / (|analytic| + eps)``.
    ``wrt`` checks other tensors (e.g. parameters) instead of ``x``;
    ``max_coords`` samples that many coordinates per tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    targets = [x] if wrt is None else list(wrt)
    for t in targets:
        t.requires_grad = True
        t.grad = None

    out = as_tensor(f(x))
    if out.has_nonfinite():
        raise FloatingPointError("finite_diff_check: f produced non-finite output")
    proj = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)

    def scalar() -> float:
        with no_grad():
            val = as_tensor(f(x)).data
        if not np.all(np.isfinite(val)):
            raise FloatingPointError("finite_diff_check: f produced non-finite output")
        return float(np.sum(val * proj))

    tsum(mul(out, Tensor(proj, dtype=out.dtype))).backward()
    worst = 0.0
    for t in targets:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            fp = scalar()
            flat[i] = old - eps
            fm = scalar()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / (abs(a) + eps))
    return worst


# -- checkpoint I/O ----------------------------------------------------------------

_MAGIC = b"GWF1"


def save_checkpoint(path, tensors: dict, precision: int | None = None) -> None:
    """Write named arrays: header (magic, precision bytes, count), then per tensor
    (name length, name, rank, extents, raw little-endian data)."""
    items = list(tensors.items())
    if precision is None:
        precision = np.dtype(items[0][1].dtype).itemsize if items else 8
    if precision not in (4, 8):
        raise ValueError("precision must be 4 or 8 bytes")
    dt = np.dtype("<f4" if precision == 4 else "<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BI", precision, len(items)))
        for name, arr in items:
            arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a GWF1 checkpoint")
    precision, count = struct.unpack_from("<BI", blob, 4)
    dt = np.dtype("<f4" if precision == 4 else "<f8")
    pos = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        nbytes = n * dt.itemsize
        if pos + nbytes > len(blob):
            raise ValueError(f"{path}: truncated data for tensor '{name}'")
        out[name] = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += nbytes
    return out
