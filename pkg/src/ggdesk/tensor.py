"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap row-major numpy buffers (float32 for training, float64 for
gradient checks).  Ops record a graph of ``Function`` nodes; ``backward``
visits each node exactly once in reverse topological order.  Every
``Function.backward`` is written in terms of tensor ops, so calling
``grad(..., create_graph=True)`` yields gradients that are themselves
differentiable (needed by the R1 penalty).

Broadcasting follows numpy's trailing-dimension rules only; anything else
requires an explicit reshape.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _grad_mode(enabled):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "fn")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.fn = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _wrap(data, fn=None):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.requires_grad = fn is not None
        t.fn = fn
        return t

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------

    def backward(self, gradient=None, create_graph=False):
        if gradient is None:
            if self.data.size != 1:
                raise ShapeError("backward() without gradient needs a scalar output")
            gradient = Tensor._wrap(np.ones_like(self.data))
        _backward([self], [gradient], create_graph=create_graph, accumulate=True)

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

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# Graph machinery
# ---------------------------------------------------------------------------


class Function:
    """One node of the backward graph; subclasses define ``backward``."""

    __slots__ = ("inputs", "out")

    def backward(self, g):
        raise NotImplementedError


def _node(data, fn, inputs):
    fn.inputs = inputs
    out = Tensor._wrap(data, fn)
    fn.out = out
    return out


def _maybe_node(data, fn_cls, inputs, *fn_args):
    """Attach a graph node only when grads are on and an input needs them."""
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        fn = fn_cls.__new__(fn_cls)
        fn._init(*fn_args)
        return _node(data, fn, inputs)
    return Tensor._wrap(data)


def _toposort(roots):
    """Functions reachable from roots, children before parents."""
    order = []
    seen = set()
    stack = [(t.fn, False) for t in roots if t.fn is not None]
    while stack:
        fn, expanded = stack.pop()
        if expanded:
            order.append(fn)
            continue
        if id(fn) in seen:
            continue
        seen.add(id(fn))
        stack.append((fn, True))
        for t in fn.inputs:
            if t.fn is not None and id(t.fn) not in seen:
                stack.append((t.fn, False))
    return order


def _backward(outputs, out_grads, create_graph=False, accumulate=False,
              needed=None, keep=None):
    order = _toposort(outputs)
    grads = {}
    leaves = {}
    for t, g in zip(outputs, out_grads):
        if g.data.shape != t.data.shape:
            raise ShapeError("output gradient shape mismatch")
        grads[id(t)] = g
    with _grad_mode(create_graph):
        for fn in reversed(order):
            oid = id(fn.out)
            if keep is not None and oid in keep:
                g = grads.get(oid)
            else:
                g = grads.pop(oid, None)
            if g is None:
                continue
            if needed is not None and id(fn) not in needed:
                continue
            in_grads = fn.backward(g)
            for inp, ig in zip(fn.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else add(prev, ig)
                if inp.fn is None:
                    leaves[id(inp)] = inp
    if accumulate:
        for lid, leaf in leaves.items():
            g = grads.get(lid)
            if g is None:
                continue
            if leaf.grad is None:
                leaf.grad = Tensor._wrap(g.data.copy())
            else:
                leaf.grad.data += g.data
    return grads


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar output w.r.t. ``inputs`` (functional, does not
    touch ``.grad``).  Only the subgraph between inputs and output is
    traversed."""
    if output.data.size != 1:
        raise ShapeError("grad() needs a scalar output")
    inputs = list(inputs)
    wanted = {id(t) for t in inputs}
    # mark tensors from which some input is reachable
    reach = {}
    for t in inputs:
        reach[id(t)] = True

    def reaches(t):
        stack = [t]
        path = []
        while stack:
            cur = stack.pop()
            if id(cur) in reach:
                continue
            if cur.fn is None:
                reach[id(cur)] = id(cur) in wanted
                continue
            pending = [i for i in cur.fn.inputs if id(i) not in reach]
            if pending:
                stack.append(cur)
                stack.extend(pending)
            else:
                reach[id(cur)] = any(reach[id(i)] for i in cur.fn.inputs)
        return reach.get(id(t), False)

    reaches(output)
    needed = set()
    for fn in _toposort([output]):
        if any(reach.get(id(i), False) for i in fn.inputs):
            needed.add(id(fn))
    one = Tensor._wrap(np.ones_like(output.data))
    grads = _backward([output], [one], create_graph=create_graph, needed=needed,
                      keep=wanted)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor._wrap(np.zeros_like(t.data))
        out.append(g)
    return out


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


class Add(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)


def add(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _maybe_node(a.data + b.data, Add, (a, b))


class Sub(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.data.shape), _unbroadcast(neg(g), b.data.shape)


def sub(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _maybe_node(a.data - b.data, Sub, (a, b))


class Mul(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(mul(g, b), a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.data.shape) if b.requires_grad else None
        return ga, gb


def mul(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _maybe_node(a.data * b.data, Mul, (a, b))


class Div(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(div(g, b), a.data.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, self.out), b)), b.data.shape)
        return ga, gb


def div(a, b):
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return _maybe_node(a.data / b.data, Div, (a, b))


class Neg(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        return (neg(g),)


def neg(a):
    return _maybe_node(-a.data, Neg, (a,))


class Pow(Function):
    __slots__ = ("p",)

    def _init(self, p):
        self.p = p

    def backward(self, g):
        (a,) = self.inputs
        p = self.p
        if p == 2:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1), float(p))),)


def power(a, p):
    return _maybe_node(a.data ** p, Pow, (a,), p)


class Exp(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        return (mul(g, self.out),)


def exp(a):
    return _maybe_node(np.exp(a.data), Exp, (a,))


class Log(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        return (div(g, self.inputs[0]),)


def log(a):
    return _maybe_node(np.log(a.data), Log, (a,))


class Sqrt(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        return (div(g, mul(self.out, 2.0)),)


def sqrt(a):
    return _maybe_node(np.sqrt(a.data), Sqrt, (a,))


class Tanh(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        y = self.out
        return (mul(g, sub(1.0, mul(y, y))),)


def tanh(a):
    return _maybe_node(np.tanh(a.data), Tanh, (a,))


class Sigmoid(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        y = self.out
        return (mul(g, mul(y, sub(1.0, y))),)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _maybe_node(_sigmoid_np(a.data), Sigmoid, (a,))


class Softplus(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        return (mul(g, sigmoid(self.inputs[0])),)


def softplus(a):
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _maybe_node(data, Softplus, (a,))


class LeakyRelu(Function):
    __slots__ = ("slope_mask",)

    def _init(self, slope_mask):
        self.slope_mask = slope_mask

    def backward(self, g):
        return (mul(g, Tensor._wrap(self.slope_mask)),)


def leaky_relu(a, alpha=0.2):
    x = a.data
    mask = np.where(x > 0, x.dtype.type(1), x.dtype.type(alpha))
    return _maybe_node(x * mask, LeakyRelu, (a,), mask)


def relu(a):
    return leaky_relu(a, 0.0)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(a % ndim if -ndim <= a < ndim else _axis_err(a, ndim) for a in axis)
    return axis


def _axis_err(a, ndim):
    raise ShapeError(f"axis {a} out of range for ndim {ndim}")


class Sum(Function):
    __slots__ = ("axis", "keepdims", "in_shape")

    def _init(self, axis, keepdims, in_shape):
        self.axis = axis
        self.keepdims = keepdims
        self.in_shape = in_shape

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            kshape = list(self.in_shape)
            for a in self.axis:
                kshape[a] = 1
            g = reshape(g, tuple(kshape))
        elif self.axis is None and not self.keepdims:
            g = reshape(g, (1,) * len(self.in_shape))
        return (broadcast_to(g, self.in_shape),)


def tsum(a, axis=None, keepdims=False):
    axis = _norm_axis(axis, a.data.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.data.dtype)
    return _maybe_node(data, Sum, (a,), axis, keepdims, a.data.shape)


def tmean(a, axis=None, keepdims=False):
    naxis = _norm_axis(axis, a.data.ndim)
    if naxis is None:
        n = a.data.size
    else:
        n = 1
        for ax in naxis:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


class BroadcastTo(Function):
    __slots__ = ("in_shape",)

    def _init(self, in_shape):
        self.in_shape = in_shape

    def backward(self, g):
        return (_unbroadcast(g, self.in_shape),)


def broadcast_to(a, shape):
    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _maybe_node(data, BroadcastTo, (a,), a.data.shape)


class Reshape(Function):
    __slots__ = ("in_shape",)

    def _init(self, in_shape):
        self.in_shape = in_shape

    def backward(self, g):
        return (reshape(g, self.in_shape),)


def reshape(a, shape):
    return _maybe_node(a.data.reshape(shape), Reshape, (a,), a.data.shape)


class Transpose(Function):
    __slots__ = ("axes",)

    def _init(self, axes):
        self.axes = axes

    def backward(self, g):
        inv = np.argsort(self.axes)
        return (transpose(g, tuple(int(i) for i in inv)),)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.data.ndim))[::-1]
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _maybe_node(data, Transpose, (a,), axes)


def swap_last2(a):
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


class Concat(Function):
    __slots__ = ("axis", "splits")

    def _init(self, axis, splits):
        self.axis = axis
        self.splits = splits

    def backward(self, g):
        out = []
        start = 0
        for width in self.splits:
            key = [slice(None)] * g.data.ndim
            key[self.axis] = slice(start, start + width)
            out.append(getitem(g, tuple(key)))
            start += width
        return tuple(out)


def concat(tensors, axis=0):
    tensors = list(tensors)
    axis = axis % tensors[0].data.ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = tuple(t.data.shape[axis] for t in tensors)
    return _maybe_node(data, Concat, tuple(tensors), axis, splits)


class GetItem(Function):
    __slots__ = ("key", "in_shape")

    def _init(self, key, in_shape):
        self.key = key
        self.in_shape = in_shape

    def backward(self, g):
        return (scatter_slice(g, self.key, self.in_shape),)


def getitem(a, key):
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.data.dtype)
    data = np.ascontiguousarray(data)
    return _maybe_node(data, GetItem, (a,), key, a.data.shape)


class ScatterSlice(Function):
    __slots__ = ("key",)

    def _init(self, key):
        self.key = key

    def backward(self, g):
        return (getitem(g, self.key),)


def scatter_slice(g, key, shape):
    data = np.zeros(shape, dtype=g.data.dtype)
    data[key] = g.data
    return _maybe_node(data, ScatterSlice, (g,), key)


class Gather(Function):
    __slots__ = ("ids", "nrows")

    def _init(self, ids, nrows):
        self.ids = ids
        self.nrows = nrows

    def backward(self, g):
        return (scatter_rows(g, self.ids, self.nrows),)


def gather(table, ids):
    """Rows of a 2-D table by an integer index array; output shape ids.shape + (D,)."""
    ids = np.asarray(ids)
    return _maybe_node(np.ascontiguousarray(table.data[ids]), Gather, (table,),
                       ids, table.data.shape[0])


class ScatterRows(Function):
    __slots__ = ("ids",)

    def _init(self, ids):
        self.ids = ids

    def backward(self, g):
        return (gather(g, self.ids),)


def scatter_rows(g, ids, nrows):
    data = np.zeros((nrows,) + g.data.shape[ids.ndim:], dtype=g.data.dtype)
    np.add.at(data, ids.reshape(-1), g.data.reshape((-1,) + g.data.shape[ids.ndim:]))
    return _maybe_node(data, ScatterRows, (g,), ids)


class Cast(Function):
    __slots__ = ("in_dtype",)

    def _init(self, in_dtype):
        self.in_dtype = in_dtype

    def backward(self, g):
        return (cast(g, self.in_dtype),)


def cast(a, dtype):
    if a.data.dtype == dtype:
        return a
    return _maybe_node(a.data.astype(dtype), Cast, (a,), a.data.dtype)


# ---------------------------------------------------------------------------
# Matmul / softmax / logsumexp
# ---------------------------------------------------------------------------


class MatMul(Function):
    __slots__ = ()

    def _init(self):
        pass

    def backward(self, g):
        a, b = self.inputs
        ga = gb = None
        if a.requires_grad:
            ga = matmul(g, swap_last2(b))
            ga = _unbroadcast(ga, a.data.shape)
        if b.requires_grad:
            gb = matmul(swap_last2(a), g)
            gb = _unbroadcast(gb, b.data.shape)
        return ga, gb


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims {a.data.shape} x {b.data.shape}")
    return _maybe_node(np.matmul(a.data, b.data), MatMul, (a, b))


class Softmax(Function):
    __slots__ = ("axis",)

    def _init(self, axis):
        self.axis = axis

    def backward(self, g):
        y = self.out
        gy = mul(g, y)
        return (sub(gy, mul(y, tsum(gy, self.axis, keepdims=True))),)


def softmax(a, axis=-1):
    axis = _norm_axis(axis, a.data.ndim)[0]
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)
    return _maybe_node(data, Softmax, (a,), axis)


class LogSumExp(Function):
    __slots__ = ("axis",)

    def _init(self, axis):
        self.axis = axis

    def backward(self, g):
        x = self.inputs[0]
        sm = exp(sub(x, self.out))
        return (mul(broadcast_to(g, x.data.shape), sm),)


def logsumexp(a, axis=-1):
    """Stable log-sum-exp with keepdims=True."""
    axis = _norm_axis(axis, a.data.ndim)[0]
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    data = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return _maybe_node(data, LogSumExp, (a,), axis)


# ---------------------------------------------------------------------------
# Convolution (shared and per-sample kernels) with double-backward support
# ---------------------------------------------------------------------------


def _check_conv_args(x, w, stride, pad):
    per_sample = w.data.ndim == 5
    ci = w.data.shape[2] if per_sample else w.data.shape[1]
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.data.shape}")
    if x.data.shape[1] != ci:
        raise ShapeError(f"conv2d channels: input {x.data.shape[1]}, kernel {ci}")
    if per_sample and w.data.shape[0] != x.data.shape[0]:
        raise ShapeError("per-sample kernel batch mismatch")
    kh, kw = w.data.shape[-2:]
    if kh > x.data.shape[2] + 2 * pad or kw > x.data.shape[3] + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input")
    if pad < 0 or stride < 1:
        raise ShapeError("pad must be >= 0 and stride >= 1")
    return per_sample


class Conv2d(Function):
    __slots__ = ("stride", "pad", "ps")

    def _init(self, stride, pad, ps):
        self.stride = stride
        self.pad = pad
        self.ps = ps

    def backward(self, g):
        x, w = self.inputs
        gx = gw = None
        if x.requires_grad:
            gx = conv2d_dx(g, w, self.stride, self.pad, x.data.shape[2], x.data.shape[3])
        if w.requires_grad:
            gw = conv2d_dw(x, g, self.stride, self.pad, w.data.shape[-2], w.data.shape[-1], self.ps)
        return gx, gw


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation; w is (Co,Ci,kh,kw) or per-sample (N,Co,Ci,kh,kw)."""
    ps = _check_conv_args(x, w, stride, pad)
    f = kernels.psconv2d if ps else kernels.conv2d
    data = f(np.ascontiguousarray(x.data), np.ascontiguousarray(w.data), stride, pad)
    return _maybe_node(data, Conv2d, (x, w), stride, pad, ps)


class Conv2dDx(Function):
    __slots__ = ("stride", "pad", "ps")

    def _init(self, stride, pad, ps):
        self.stride = stride
        self.pad = pad
        self.ps = ps

    def backward(self, u):
        dy, w = self.inputs
        g_dy = gw = None
        if dy.requires_grad:
            g_dy = conv2d(u, w, self.stride, self.pad)
        if w.requires_grad:
            gw = conv2d_dw(u, dy, self.stride, self.pad, w.data.shape[-2], w.data.shape[-1], self.ps)
        return g_dy, gw


def conv2d_dx(dy, w, stride, pad, H, W):
    ps = w.data.ndim == 5
    f = kernels.psconv2d_dx if ps else kernels.conv2d_dx
    data = f(np.ascontiguousarray(dy.data), np.ascontiguousarray(w.data), stride, pad, H, W)
    return _maybe_node(data, Conv2dDx, (dy, w), stride, pad, ps)


class Conv2dDw(Function):
    __slots__ = ("stride", "pad", "ps")

    def _init(self, stride, pad, ps):
        self.stride = stride
        self.pad = pad
        self.ps = ps

    def backward(self, uw):
        x, dy = self.inputs
        gx = g_dy = None
        if x.requires_grad:
            gx = conv2d_dx(dy, uw, self.stride, self.pad, x.data.shape[2], x.data.shape[3])
        if dy.requires_grad:
            g_dy = conv2d(x, uw, self.stride, self.pad)
        return gx, g_dy


def conv2d_dw(x, dy, stride, pad, kh, kw, ps):
    f = kernels.psconv2d_dw if ps else kernels.conv2d_dw
    data = f(np.ascontiguousarray(x.data), np.ascontiguousarray(dy.data), stride, pad, kh, kw)
    return _maybe_node(data, Conv2dDw, (x, dy), stride, pad, ps)


# ---------------------------------------------------------------------------
# Separable image resize (linear, exact adjoint)
# ---------------------------------------------------------------------------


def _cubic(t, a=-0.5):
    at = np.abs(t)
    return np.where(
        at <= 1, (a + 2) * at**3 - (a + 3) * at**2 + 1,
        np.where(at < 2, a * at**3 - 5 * a * at**2 + 8 * a * at - 4 * a, 0.0),
    )


@lru_cache(maxsize=None)
def resize_matrix(n_in, n_out, mode):
    """Row-stochastic (n_out, n_in) resampling matrix, float64."""
    A = np.zeros((n_out, n_in))
    scale = n_in / n_out
    if mode == "nearest":
        for i in range(n_out):
            src = min(n_in - 1, int((i + 0.5) * scale))
            A[i, src] = 1.0
    elif mode == "bilinear":
        support = max(1.0, scale)
        for i in range(n_out):
            pos = (i + 0.5) * scale - 0.5
            lo = int(np.floor(pos - support)) ; hi = int(np.ceil(pos + support))
            for j in range(lo, hi + 1):
                wgt = max(0.0, 1.0 - abs(pos - j) / support)
                A[i, min(max(j, 0), n_in - 1)] += wgt
    elif mode == "area":
        # box filter over the source span of each output pixel
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, min(j1, n_in)):
                A[i, j] = min(hi, j + 1) - max(lo, j)
    elif mode == "bicubic":
        support = 2.0 * max(1.0, scale)
        for i in range(n_out):
            pos = (i + 0.5) * scale - 0.5
            lo = int(np.floor(pos - support)) ; hi = int(np.ceil(pos + support))
            for j in range(lo, hi + 1):
                wgt = _cubic((pos - j) / max(1.0, scale))
                A[i, min(max(j, 0), n_in - 1)] += wgt
    else:
        raise ShapeError(f"unknown resize mode {mode!r}")
    A /= A.sum(axis=1, keepdims=True)
    A.setflags(write=False)
    return A


class Resize2d(Function):
    __slots__ = ("ah", "aw")

    def _init(self, ah, aw):
        self.ah = ah
        self.aw = aw

    def backward(self, g):
        # adjoint resize; not normalized, exactly A^T
        return (_resize_apply(g, self.ah.T, self.aw.T),)


def _resize_apply(x, ah, aw):
    n, c, h, w = x.data.shape
    ah_ = np.ascontiguousarray(ah, dtype=x.data.dtype)
    aw_ = np.ascontiguousarray(aw, dtype=x.data.dtype)
    flat = x.data.reshape(n * c, h, w)
    data = np.matmul(np.matmul(ah_, flat), aw_.T)
    data = np.ascontiguousarray(data.reshape(n, c, ah_.shape[0], aw_.shape[0]))
    return _maybe_node(data, Resize2d, (x,), ah, aw)


def interpolate2d(x, factor, mode="bilinear"):
    """Resize NCHW by ``factor`` (>1 upsample, <1 downsample)."""
    if x.data.ndim != 4:
        raise ShapeError("interpolate2d wants NCHW")
    n, c, h, w = x.data.shape
    h2, w2 = round(h * factor), round(w * factor)
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"resize factor {factor} collapses {h}x{w}")
    return _resize_apply(x, resize_matrix(h, h2, mode), resize_matrix(w, w2, mode))


def resize_to(x, size, mode="bilinear"):
    n, c, h, w = x.data.shape
    return _resize_apply(x, resize_matrix(h, size, mode), resize_matrix(w, size, mode))


def l2_norm(a, axis=-1, keepdims=False, eps=0.0):
    s = tsum(mul(a, a), axis=axis, keepdims=keepdims)
    return sqrt(add(s, eps)) if eps else sqrt(s)


def normalize(a, axis=-1, eps=1e-8):
    """Scale to unit L2 norm along ``axis``."""
    return div(a, l2_norm(a, axis=axis, keepdims=True, eps=eps))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradcheck(fn, inputs, eps=1e-5, rtol=1e-4, seed=0):
    """Compare analytic gradients of ``fn(*inputs)`` against central finite
    differences in float64.  ``fn`` may return any tensor; it is reduced to
    a scalar with a fixed random projection.  Returns max relative error."""
    inputs = [Tensor(t.data.astype(np.float64), requires_grad=True)
              if isinstance(t, Tensor) else Tensor(np.asarray(t, np.float64), requires_grad=True)
              for t in inputs]
    out = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(out.data.shape)
    w = Tensor._wrap(proj)

    def scalar(*args):
        return tsum(mul(fn(*args), w))

    loss = scalar(*inputs)
    analytic = grad(loss, inputs)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            # graphs are still built here: fn may use grad() internally
            orig = flat[i]
            flat[i] = orig + eps
            hi = scalar(*inputs).item()
            flat[i] = orig - eps
            lo = scalar(*inputs).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
        denom = max(1.0, np.abs(num).max())
        err = np.abs(g.data - num).max() / denom
        worst = max(worst, err)
    if worst >= rtol:
        raise AssertionError(f"gradcheck failed: max rel err {worst:.3e} >= {rtol}")
    return worst
