"""Dense tensors with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to per-parent gradients.
:func:`backward` sorts the graph topologically (the :class:`Tape`) and walks it
once in reverse.
"""

import contextlib
import os
import threading

import numpy as np

from kpdeblur.errors import InternalError, ParameterError

_PRECISIONS = {32: np.float32, 64: np.float64}

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_dtype():
    return _PRECISIONS[_get("precision", 32)]


def get_precision():
    return _get("precision", 32)


def set_precision(bits):
    if bits not in _PRECISIONS:
        raise ParameterError(f"precision must be 32 or 64, got {bits}")
    _state.precision = bits


@contextlib.contextmanager
def precision(bits):
    """Temporarily switch the default floating-point width (32 or 64)."""
    old = get_precision()
    set_precision(bits)
    try:
        yield
    finally:
        _state.precision = old


def grad_enabled():
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; results carry no parents and no grad buffers."""
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


_DEBUG = os.environ.get("KPDEBLUR_DEBUG", "") not in ("", "0")


def set_debug(flag):
    """Toggle the finite-value assertion run after every operation."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    """N-d real array with an optional gradient buffer.

    ``init`` is only meaningful for parameters: one of ``"fan_in"``, ``"zeros"``,
    ``"ones"``; ``fan_in`` overrides the fan-in inferred from the shape.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype(), order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.init = None
        self.fan_in = None
        self._parents = ()
        self._backward = None
        self._op = None

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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- arithmetic sugar -------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def abs(self):
        return tabs(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_result(data, parents, backward_fn, op=None):
    """Wrap ``data`` as an op output; record the graph edge if needed.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.init = None
    out.fan_in = None
    out._op = op
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op or 'operation'}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _dtype_of(*xs):
    for x in xs:
        if isinstance(x, Tensor):
            return x.dtype
    return get_dtype()


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------
def add(a, b):
    dt = _dtype_of(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    dt = _dtype_of(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    dt = _dtype_of(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b):
    dt = _dtype_of(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a):
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    ad = a.data
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def sqrt(a):
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g / (2 * out),), "sqrt")


def exp(a):
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def tabs(a):
    s = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def leaky_relu(a, slope=0.1):
    mask = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "leaky_relu")


# -- reductions & shape ---------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    return make_result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.asarray(a.data[idx], order="C"), (a,), backward, "getitem")


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis),
                       tuple(tensors), backward, "concat")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


# -- tape & backward ------------------------------------------------------
class Tape:
    """Topologically ordered list of the graph nodes a loss depends on."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        order = []
        state = {}  # id -> 1 visiting, 2 done
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            mark = state.get(key)
            if mark == 2:
                continue
            if mark == 1:
                raise InternalError("cycle detected in computation graph")
            state[key] = 1
            stack.append((node, True))
            for p in node._parents:
                pm = state.get(id(p))
                if pm == 1:
                    raise InternalError("cycle detected in computation graph")
                if pm is None and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf."""
    if loss.size != 1:
        raise ParameterError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = Tape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
