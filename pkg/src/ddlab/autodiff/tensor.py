"""Dense float64 tensors with eager reverse-mode differentiation.

A graph edge is recorded whenever an input requires a gradient and
recording is enabled. ``backward`` walks the graph once, populates ``grad``
on reachable leaves and then frees the graph.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np

from .. import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_recording = contextvars.ContextVar("ddlab_recording", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current context."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


@contextlib.contextmanager
def frozen(params):
    """Temporarily clear ``requires_grad`` on ``params``.

    Used by attacks so that only the input-dependent part of the graph is
    recorded and parameter gradients are never touched.
    """
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def _check_finite(op, arr):
    if not math.isfinite(float(arr.sum())):
        raise NonFiniteError(f"{op}: non-finite output")
    return arr


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    nlead = grad.ndim - len(shape)
    if nlead:
        grad = grad.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True)
        _check_finite("tensor", arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._backward = None
        t._op = None
        return t

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on tensor of shape {self.shape}")

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(op, arr, parents, backward_fn):
    """Wrap ``arr`` and record an edge if any parent needs a gradient."""
    _check_finite(op, arr)
    out = Tensor._wrap(arr)
    if _recording.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


# -- elementwise / broadcasting ---------------------------------------------
def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    if (bd == 0).any():
        raise NonFiniteError("div: zero denominator")
    out = ad / bd
    return _result("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scalar_mul(a, c):
    c = float(c)
    return _result("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def relu(a):
    mask = a.data > 0
    return _result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a):
    x = np.ascontiguousarray(a.data)
    out, t = kernels.gelu_fwd(x)
    return _result("gelu", out, (a,),
                   lambda g: (kernels.gelu_bwd(x, t, np.ascontiguousarray(g)),))


def exp(a):
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def log(a):
    x = a.data
    if (x <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def clamp(a, lo=None, hi=None):
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x > lo
    if hi is not None:
        mask &= x < hi
    return _result("clamp", out, (a,), lambda g: (g * mask,))


# -- reductions and shape ops --------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return scalar_mul(sum_(a, axes, keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _result("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def slice_(a, index):
    """Basic or advanced indexing; the backward scatters with ``np.add.at``."""
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {shape}") from None

    basic = _is_basic(index)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result("slice", np.array(out, dtype=np.float64), (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(weight, ids):
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"embedding: ids out of range for table {weight.shape}")
    wshape = weight.shape

    def bw(g):
        full = np.zeros(wshape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, wshape[1]))
        return (full,)

    return _result("embedding", weight.data[ids], (weight,), bw)


# -- linear algebra ------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = (a2.T @ g2) if b.requires_grad else None
            return ga, gb
    else:
        try:
            out = ad @ bd
        except ValueError:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

        def bw(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
            return ga, gb

    return _result("matmul", out, (a, b), bw)


# -- normalizations ------------------------------------------------------------
def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def _rowwise(op, a, axis, fwd, bwd):
    """Apply a last-axis row kernel along ``axis`` by moving it last."""
    axis = axis % a.ndim
    x = np.moveaxis(a.data, axis, -1)
    moved_shape = x.shape
    out = fwd(_rows(x)).reshape(moved_shape)

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        return (np.moveaxis(bwd(_rows(out), _rows(gm)).reshape(moved_shape), -1, axis),)

    return _result(op, np.ascontiguousarray(np.moveaxis(out, -1, axis)), (a,), bw)


def softmax(a, axis=-1):
    return _rowwise("softmax", a, axis, kernels.softmax_fwd, kernels.softmax_bwd)


def log_softmax(a, axis=-1):
    return _rowwise("log_softmax", a, axis, kernels.log_softmax_fwd, kernels.log_softmax_bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} with gamma {gamma.shape}, beta {beta.shape}")
    shape = a.shape
    out, xhat, rstd = kernels.layer_norm_fwd(_rows(a.data), gamma.data, beta.data, eps)

    def bw(g):
        dx, dg, db = kernels.layer_norm_bwd(_rows(g), xhat, gamma.data, rstd)
        return dx.reshape(shape), dg, db

    return _result("layer_norm", out.reshape(shape), (a, gamma, beta), bw)


def l2_normalize(a, axis=-1):
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise NonFiniteError("l2_normalize: zero-norm slice")
    y = x / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _result("l2_normalize", y, (a,), bw)


# -- differentiation -------------------------------------------------------------
def _toposort(root):
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


def backward(root):
    """Populate ``grad`` on every requires-grad leaf reachable from ``root``.

    Gradients add into any existing ``grad``. The graph is released afterwards.
    """
    if root.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward: root is detached from any recorded graph")
    order = _toposort(root)
    grads = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None
        node.requires_grad = False


def grad_of(fn, x):
    """Gradient of scalar ``fn(x)`` with respect to array ``x``."""
    xt = Tensor(x, requires_grad=True)
    out = fn(xt)
    backward(out)
    return out.item(), (xt.grad if xt.grad is not None else np.zeros(xt.shape))


PRIMITIVES = {
    "matmul": matmul, "add": add, "sub": sub, "elementwise-mul": mul,
    "div": div, "scalar-mul": scalar_mul, "gelu": gelu, "relu": relu, "exp": exp, "log": log,
    "mean": mean, "sum": sum_, "reshape": reshape, "transpose": transpose,
    "slice": slice_, "concat": concat, "embedding-lookup": embedding,
    "layer-norm": layer_norm, "softmax": softmax, "log-softmax": log_softmax,
    "l2-normalize": l2_normalize, "clamp": clamp,
}


def forward_primitive(op, *inputs, **kwargs):
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)
