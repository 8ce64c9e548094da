"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray together with an optional gradient
accumulator.  Operations on tensors record their inputs and a local
backward rule; calling ``backward()`` on a scalar result walks the
recorded graph in reverse topological order and accumulates gradients
into every tensor that requires them.  Each backward pass adds its
contribution, so two passes without ``zero_grad`` double the gradient.

Broadcasting follows numpy's trailing-dimension rules.  The gradient of
a broadcast input is the sum of the output gradient over the broadcast
axes, so shapes always round-trip.  All reductions are sequential numpy
reductions; identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import contextlib

import numpy as np


class ShapeError(ValueError):
    """Raised when shapes, axes or graph structure violate a contract."""


class DomainError(ValueError):
    """Raised when values leave an operation's domain (log <= 0, x/0, NaN)."""


_grad_enabled = True
_store_op_grads = True


def is_grad_enabled():
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def leaf_grads_only():
    """Route gradients without retaining them on op results.

    Leaf tensors (parameters, explicitly constructed inputs) still
    accumulate normally; intermediate results skip the stored copy.
    Training loops use this, debugging and tests keep the default.
    """
    global _store_op_grads
    prev = _store_op_grads
    _store_op_grads = False
    try:
        yield
    finally:
        _store_op_grads = prev


def _as_array(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """float64 array with an additive gradient accumulator.

    ``requires_grad`` marks the tensor as a gradient target; results of
    operations require gradients when any input does and recording is
    enabled.  For tensors constructed directly with ``requires_grad=True``
    (parameters, test inputs) ``grad`` starts as a same-shape zero array;
    operation results allocate their accumulator on first delivery instead,
    so untouched intermediates cost nothing.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_live", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self._live = ()

    # ---- introspection ----

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        """Same values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    # ---- graph walk ----

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable ``grad``.

        Only scalar tensors may seed a backward pass.  Gradients flow
        through per-pass buffers, so repeated calls add independent
        full contributions rather than compounding partial ones.
        """
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor, got shape %s"
                             % (self.data.shape,))
        if not self.requires_grad:
            raise ShapeError("backward() on a tensor with no recorded graph")
        order = _toposort(self)
        flow = {id(self): np.ones_like(self.data)}
        store = _store_op_grads
        for node in reversed(order):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            bk = node._backward
            if bk is None or store:
                # flow arrays may be shared between siblings; copy, not alias
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            if bk is None:
                continue
            for parent, live, pg in zip(node._parents, node._live, bk(g)):
                if pg is None or not live:
                    continue
                held = flow.get(id(parent))
                flow[id(parent)] = pg if held is None else held + pg

    # ---- operator sugar ----

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

    def __pow__(self, other):
        return power(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 else axes[0])


def _toposort(root):
    # Iterative post-order DFS; parents land before children, so the
    # reversed list visits each op only after everything it feeds.
    out = []
    stack = [(root, False)]
    seen = set()
    while stack:
        node, done = stack.pop()
        if done:
            out.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, live in zip(node._parents, node._live):
            if live and id(p) not in seen:
                stack.append((p, False))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, live=None):
    # liveness is frozen at record time: flipping requires_grad later
    # (e.g. thawing a frozen group) does not resurrect recorded branches.
    # Ops that capture per-parent flags in their closures pass them in so
    # record and routing agree; the accumulator stays lazy (see Tensor).
    if live is None:
        live = tuple(p.requires_grad for p in parents)
    if not _grad_enabled or not any(live):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    out._live = live
    return out


def _broadcast_op(name, a, b, fn):
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name}: incompatible shapes {a.data.shape} and "
                         f"{b.data.shape}") from exc


# ---- elementwise ----
#
# Binary ops capture each operand's requires_grad at record time and skip
# the dead branch in backward: a constant operand (mask, coefficient,
# detached target) never pays for a gradient that would be dropped.

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    data = _broadcast_op("add", a, b, np.add)
    na, nb = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(g, b.data.shape) if nb else None)

    return _result(data, (a, b), back, (na, nb))


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    data = _broadcast_op("sub", a, b, np.subtract)
    na, nb = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(-g, b.data.shape) if nb else None)

    return _result(data, (a, b), back, (na, nb))


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    data = _broadcast_op("mul", a, b, np.multiply)
    na, nb = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g * b.data, a.data.shape) if na else None,
                _unbroadcast(g * a.data, b.data.shape) if nb else None)

    return _result(data, (a, b), back, (na, nb))


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    data = _broadcast_op("div", a, b, np.divide)
    na, nb = a.requires_grad, b.requires_grad

    def back(g):
        return (_unbroadcast(g / b.data, a.data.shape) if na else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
                if nb else None)

    return _result(data, (a, b), back, (na, nb))


def neg(a):
    a = _coerce(a)

    def back(g):
        return (-g,)

    return _result(-a.data, (a,), back)


def power(a, b):
    """a ** b with scalar or tensor exponent.

    A tensor exponent that itself needs gradients requires a strictly
    positive base (the exponent gradient contains log a).
    """
    a = _coerce(a)
    if isinstance(b, Tensor):
        data = _broadcast_op("pow", a, b, np.power)
        na, nb = a.requires_grad, b.requires_grad
        if nb and np.any(a.data <= 0.0):
            raise DomainError("pow: tensor exponent gradient needs base > 0")

        def back(g):
            ga = _unbroadcast(g * b.data * np.power(a.data, b.data - 1.0),
                              a.data.shape) if na else None
            gb = _unbroadcast(g * data * np.log(a.data),
                              b.data.shape) if nb else None
            return ga, gb

        return _result(data, (a, b), back, (na, nb))

    exponent = float(b)
    data = np.power(a.data, exponent)

    def back_scalar(g):
        return (g * exponent * np.power(a.data, exponent - 1.0),)

    return _result(data, (a,), back_scalar)


def exp(a):
    a = _coerce(a)
    data = np.exp(a.data)

    def back(g):
        return (g * data,)

    return _result(data, (a,), back)


def log(a):
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    data = np.log(a.data)

    def back(g):
        return (g / a.data,)

    return _result(data, (a,), back)


def sqrt(a):
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    data = np.sqrt(a.data)

    def back(g):
        return (g * 0.5 / data,)

    return _result(data, (a,), back)


def sigmoid(a):
    a = _coerce(a)
    # clip keeps exp in range; sigmoid is constant to 1e-26 beyond +-60
    data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

    def back(g):
        return (g * data * (1.0 - data),)

    return _result(data, (a,), back)


def tanh(a):
    a = _coerce(a)
    data = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - data * data),)

    return _result(data, (a,), back)


def relu(a):
    a = _coerce(a)
    data = np.maximum(a.data, 0.0)

    def back(g):
        return (g * (a.data > 0.0),)

    return _result(data, (a,), back)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only where unclamped."""
    a = _coerce(a)
    data = np.clip(a.data, lo, hi)

    def back(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _result(data, (a,), back)


# ---- linear algebra ----

def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires tensors with at least 2 dimensions")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and "
                         f"{b.data.shape}") from exc
    na, nb = a.requires_grad, b.requires_grad

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)),
                          a.data.shape) if na else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g),
                          b.data.shape) if nb else None
        return ga, gb

    return _result(data, (a, b), back, (na, nb))


# ---- reductions ----

def _check_axis(axis, ndim):
    if axis is None:
        return None
    if not isinstance(axis, int):
        raise ShapeError(f"axis must be None or int, got {axis!r}")
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim} dimensions")
    return axis % ndim


def tsum(a, axis=None, keepdims=False):
    a = _coerce(a)
    axis = _check_axis(axis, a.data.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape),)

    return _result(data, (a,), back)


def tmean(a, axis=None, keepdims=False):
    a = _coerce(a)
    axis = _check_axis(axis, a.data.ndim)
    count = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape) / count,)

    return _result(data, (a,), back)


def tmax(a, axis=None, keepdims=False):
    """Max reduction; ties send the gradient to the first maximal entry."""
    a = _coerce(a)
    axis = _check_axis(axis, a.data.ndim)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def back(g):
        mask = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.data.shape)
            mask[idx] = 1.0
            return (mask * g,)
        arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        np.put_along_axis(mask, arg, 1.0, axis=axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (mask * gg,)

    return _result(data, (a,), back)


def softmax(a, axis=-1):
    """Stable softmax along one axis; rejects NaN input."""
    a = _coerce(a)
    axis = _check_axis(axis, a.data.ndim)
    if np.isnan(a.data).any():
        raise DomainError("softmax: NaN in input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - inner),)

    return _result(data, (a,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then apply
    an elementwise scale and shift.

    Records one graph node; forward and backward are the closed forms of
    the equivalent mean/variance op chain, so results match the composed
    version to float rounding at a fraction of the graph size.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if eps <= 0.0:
        raise DomainError("layer_norm: eps must be positive")
    if x.data.ndim < 1:
        raise ShapeError("layer_norm: input must have at least 1 dimension")
    width = x.data.shape[-1]
    if gamma.data.shape != (width,) or beta.data.shape != (width,):
        raise ShapeError(f"layer_norm: scale/shift must have shape ({width},), "
                         f"got {gamma.data.shape} and {beta.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv
    data = y * gamma.data + beta.data
    nx, ng, nb = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def back(g):
        gx = gg = gb = None
        if nx:
            gy = g * gamma.data
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                        - y * (gy * y).mean(axis=-1, keepdims=True))
        if ng:
            gg = (g * y).reshape(-1, width).sum(axis=0)
        if nb:
            gb = g.reshape(-1, width).sum(axis=0)
        return gx, gg, gb

    return _result(data, (x, gamma, beta), back, (nx, ng, nb))


# ---- structure ----

def reshape(a, shape):
    a = _coerce(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from exc

    def back(g):
        return (g.reshape(a.data.shape),)

    return _result(data, (a,), back)


def transpose(a, axes):
    a = _coerce(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of "
                         f"{a.data.ndim} axes")
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inverse),)

    return _result(data, (a,), back)


def getitem(a, key):
    """Basic slicing/ints only; use gather_rows for index arrays."""
    a = _coerce(a)
    if isinstance(key, (list, np.ndarray)) or (
            isinstance(key, tuple) and any(isinstance(k, (list, np.ndarray))
                                           for k in key)):
        raise ShapeError("getitem supports basic indexing only")
    data = a.data[key]

    def back(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _result(np.array(data), (a,), back)


def concat(tensors, axis=0):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = _check_axis(axis, tensors[0].data.ndim)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: shapes do not line up") from exc
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(data, tuple(tensors), back)


def gather_rows(a, idx):
    """Select rows along axis 0; duplicate indices accumulate gradient."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-d index array")
    data = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(data, (a,), back)


def scatter_rows(base, idx, rows):
    """Copy of ``base`` with ``rows`` written at positions ``idx`` (axis 0)."""
    base, rows = _coerce(base), _coerce(rows)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("scatter_rows expects a 1-d index array")
    if len(np.unique(idx)) != len(idx):
        raise ShapeError("scatter_rows requires unique indices")
    if rows.data.shape != (len(idx),) + base.data.shape[1:]:
        raise ShapeError(f"scatter_rows: rows shape {rows.data.shape} does not "
                         f"match target {(len(idx),) + base.data.shape[1:]}")
    data = base.data.copy()
    data[idx] = rows.data
    nbase, nrows = base.requires_grad, rows.requires_grad

    def back(g):
        if nbase:
            gb = g.copy()
            gb[idx] = 0.0
        else:
            gb = None
        return gb, g[idx] if nrows else None

    return _result(data, (base, rows), back, (nbase, nrows))


# ---- verification ----

def grad_check(f, xs, h=1e-5):
    """Compare reverse-mode gradients of scalar ``f`` to central differences.

    ``xs`` is one tensor or a list of tensors, each with requires_grad
    set.  Returns the worst relative error
    ``|analytic - numeric| / max(1, |numeric|)`` over every coordinate.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        if not x.requires_grad:
            raise ShapeError("grad_check inputs must require gradients")
        x.zero_grad()
    out = f(*xs)
    if out.data.size != 1:
        raise ShapeError("grad_check target must be scalar")
    out.backward()
    analytic = [x.grad.copy() for x in xs]
    worst = 0.0
    for xi, x in enumerate(xs):
        flat = x.data.reshape(-1)
        aflat = analytic[xi].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            with no_grad():
                fp = float(f(*xs).data)
            flat[j] = keep - h
            with no_grad():
                fm = float(f(*xs).data)
            flat[j] = keep
            numeric = (fp - fm) / (2.0 * h)
            err = abs(aflat[j] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
