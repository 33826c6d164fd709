"""Reverse-mode automatic differentiation over dense 2D float64 matrices.

Graphs are built define-by-run: every primitive call returns a new
:class:`Node` holding its value and a closure that maps the output adjoint to
operand adjoints. :func:`backward` walks the graph in reverse topological
order and accumulates adjoints.

Batches are folded into rows. Elementwise binary primitives accept operands
of equal shape, or operands where one side has extent 1 along an axis (a row
vector bias added to every row, a 1x1 scalar, ...). Gradients of broadcast
operands are summed back to the operand shape.
"""

import numpy as np

from .errors import DomainError, InvalidValue, ShapeError

__all__ = [
    "Node",
    "leaf",
    "constant",
    "apply",
    "backward",
    "zero_grad",
    "topological_order",
    "check_gradients",
    "finite_difference_check",
    "PRIMITIVES",
]


def _as_matrix(value):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim > 2:
        raise ShapeError(f"only 2D matrices are supported, got shape {arr.shape}")
    return arr


class Node:
    """A value in the computation graph together with its adjoint."""

    __slots__ = ("value", "_adjoint", "parents", "op", "requires_grad", "_vjp")

    def __init__(self, value, parents=(), op="leaf", requires_grad=False, vjp=None):
        self.value = value
        self._adjoint = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def adjoint(self):
        if self._adjoint is None:
            return np.zeros_like(self.value)
        return self._adjoint

    @adjoint.setter
    def adjoint(self, value):
        self._adjoint = None if value is None else np.asarray(value, dtype=np.float64)

    grad = adjoint

    def item(self):
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the primitive table
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(_lift(other), self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, _lift(other))

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def leaf(value, requires_grad=True):
    """Create a parentless node. Raises InvalidValue on NaN/Inf input."""
    arr = _as_matrix(value)
    if not np.all(np.isfinite(arr)):
        raise InvalidValue("leaf value contains NaN or Inf")
    return Node(arr, op="leaf", requires_grad=requires_grad)


def constant(value):
    return leaf(value, requires_grad=False)


def _lift(x):
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, op, vjp):
    requires_grad = any(p.requires_grad for p in parents)
    return Node(value, parents, op, requires_grad, vjp if requires_grad else None)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _broadcast_shape(a, b, op):
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    return shape


# -- elementwise binary ------------------------------------------------------


def add(a, b):
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    _broadcast_shape(a, b, "mul_elementwise")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), "mul_elementwise",
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    _broadcast_shape(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("div: division by zero")
    out = av / bv
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


# -- elementwise unary -------------------------------------------------------


def scale(a, c):
    c = float(c)
    return _make(a.value * c, (a,), "scale", lambda g: (g * c,))


def negate(a):
    return _make(-a.value, (a,), "negate", lambda g: (-g,))


def sigmoid(a):
    x = a.value
    # tanh form avoids overflow in exp for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def softplus(a):
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), "softplus", lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def log(a):
    x = a.value
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(x), (a,), "log", lambda g: (g / x,))


def exp(a):
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def square(a):
    x = a.value
    return _make(x * x, (a,), "square", lambda g: (2.0 * g * x,))


def lstm_gates(z, c_prev=None):
    """Fused LSTM nonlinearity.

    ``z`` holds the pre-activations [i | f | o | c~] (B x 4h); returns the
    B x 2h node [c_t | y_t] with c_t = f*c_prev + i*c~ and y_t = o*tanh(c_t).
    ``c_prev=None`` means a zero previous cell state.
    """
    zv = z.value
    if zv.shape[1] % 4:
        raise ShapeError(f"lstm_gates: width {zv.shape[1]} is not a multiple of 4")
    h = zv.shape[1] // 4
    if c_prev is not None and c_prev.shape != (zv.shape[0], h):
        raise ShapeError(f"lstm_gates: c_prev {c_prev.shape} != {(zv.shape[0], h)}")
    sig = 0.5 * (1.0 + np.tanh(0.5 * zv[:, :3 * h]))
    i, f, o = sig[:, :h], sig[:, h:2 * h], sig[:, 2 * h:]
    g_ = np.tanh(zv[:, 3 * h:])
    cp = None if c_prev is None else c_prev.value
    c = i * g_ if cp is None else f * cp + i * g_
    tc = np.tanh(c)
    out = np.concatenate([c, o * tc], axis=1)

    def vjp(g):
        gc = g[:, :h] + g[:, h:] * o * (1.0 - tc * tc)
        dz = np.empty_like(zv)
        dz[:, :h] = gc * g_ * i * (1.0 - i)
        dz[:, h:2 * h] = 0.0 if cp is None else gc * cp * f * (1.0 - f)
        dz[:, 2 * h:3 * h] = g[:, h:] * tc * o * (1.0 - o)
        dz[:, 3 * h:] = gc * i * (1.0 - g_ * g_)
        if cp is None:
            return (dz,)
        return dz, gc * f

    parents = (z,) if c_prev is None else (z, c_prev)
    return _make(out, parents, "lstm_gates", vjp)


# -- reductions --------------------------------------------------------------


def sum(a, axis=None):  # noqa: A001 - mirrors the primitive name
    x = a.value
    if axis is None:
        out = np.array([[x.sum()]])
        return _make(out, (a,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))
    out = x.sum(axis=axis, keepdims=True)
    return _make(out, (a,), "sum", lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(a, axis=None):
    x = a.value
    n = x.size if axis is None else x.shape[axis]
    if axis is None:
        out = np.array([[x.mean()]])
    else:
        out = x.mean(axis=axis, keepdims=True)
    return _make(out, (a,), "mean", lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def logsumexp(a, axis=0):
    """log(sum(exp(a))) along ``axis`` with max-shift stabilisation."""
    x = a.value
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x - m).sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    return _make(out, (a,), "logsumexp", lambda g: (g * np.exp(x - out),))


# -- structural --------------------------------------------------------------


def concat_rows(*nodes):
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])
    out = np.concatenate([n.value for n in nodes], axis=0)
    return _make(out, nodes, "concat_rows",
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(nodes))))


def concat_cols(*nodes):
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [n.shape[1] for n in nodes])
    out = np.concatenate([n.value for n in nodes], axis=1)
    return _make(out, nodes, "concat_cols",
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(nodes))))


class _Scatter:
    """Gradient that touches only ``index`` of the parent; added in place."""

    __slots__ = ("index", "grad")

    def __init__(self, index, grad):
        self.index = index
        self.grad = grad


def slice_rows(a, start, stop):
    x = a.value
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {x.shape}")
    index = (slice(start, stop), slice(None))
    return _make(x[index], (a,), "slice_rows", lambda g: (_Scatter(index, g),))


def slice_cols(a, start, stop):
    x = a.value
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for {x.shape}")
    index = (slice(None), slice(start, stop))
    return _make(x[index], (a,), "slice_cols", lambda g: (_Scatter(index, g),))


def reshape(a, shape):
    x = a.value
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    if out.ndim != 2:
        raise ShapeError("reshape target must be 2D")
    return _make(out, (a,), "reshape", lambda g: (g.reshape(x.shape),))


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "div": div,
    "matmul": matmul,
    "scale": scale,
    "negate": negate,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "square": square,
    "sum": sum,
    "mean": mean,
    "logsumexp": logsumexp,
    "concat_rows": concat_rows,
    "concat_cols": concat_cols,
    "slice_rows": slice_rows,
    "slice_cols": slice_cols,
    "reshape": reshape,
    "lstm_gates": lstm_gates,
}


def apply(primitive, *operands, **kwargs):
    """Look up ``primitive`` by name and apply it to ``operands``."""
    try:
        fn = PRIMITIVES[primitive]
    except KeyError:
        raise InvalidValue(f"unknown primitive {primitive!r}") from None
    return fn(*operands, **kwargs)


# -- backward pass -----------------------------------------------------------


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, parents first."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into the adjoint of every reachable node."""
    if root.value.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) root, got {root.value.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    seed = np.ones((1, 1))
    root._adjoint = seed if root._adjoint is None else root._adjoint + seed
    # adjoints first written during this pass are private copies, so later
    # contributions can be added in place
    owned = set()
    for node in reversed(order):
        if node._vjp is None or node._adjoint is None:
            continue
        grads = node._vjp(node._adjoint)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            key = id(parent)
            scatter = isinstance(g, _Scatter)
            if key not in owned:
                owned.add(key)
                if parent._adjoint is None and not scatter:
                    parent._adjoint = np.array(g, dtype=np.float64)
                    continue
                parent._adjoint = (np.zeros(parent.value.shape) if parent._adjoint is None
                                   else np.array(parent._adjoint, dtype=np.float64))
            if scatter:
                parent._adjoint[g.index] += g.grad
            else:
                parent._adjoint += g


def zero_grad(nodes):
    """Reset adjoints. Accepts a root node (clears its whole graph) or an iterable."""
    if isinstance(nodes, Node):
        nodes = topological_order(nodes)
    for n in nodes:
        n._adjoint = None


# -- finite-difference oracle ------------------------------------------------


def check_gradients(loss_fn, params, epsilon=1e-5):
    """Max relative error between backprop and central differences.

    ``loss_fn`` rebuilds the graph from the leaves in ``params`` and returns a
    scalar node. Each leaf value is perturbed in place and restored.
    """
    if epsilon <= 0:
        raise InvalidValue("epsilon must be positive")
    zero_grad(params)
    root = loss_fn()
    backward(root)
    analytic = [p.adjoint.copy() for p in params]
    zero_grad(params)

    def evaluate():
        v = loss_fn().item()
        if not np.isfinite(v):
            raise InvalidValue("loss is not finite during finite differencing")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst


def finite_difference_check(f, point, epsilon=1e-5):
    """Compare the gradient of ``f`` at ``point`` against central differences.

    ``f`` maps a leaf node to a scalar node.
    """
    x = leaf(point)
    return check_gradients(lambda: f(x), [x], epsilon)
