# src/tensor_core.py
"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation result remembers its parents and a gradient rule. Node ids are
issued in creation order, so parents always carry smaller ids than their
children and sorting reachable nodes by descending id is a valid reverse
topological order for the backward pass.
"""
import itertools
import threading

import numpy as np

from .errors import ContractError, DimensionError

_NODE_IDS = itertools.count()


class Graph:
    """Append-only tape of the nodes created while the graph is active.

    Use as a context manager; graphs are per thread, so two threads never
    share a tape.
    """
    _local = threading.local()

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        Graph._stack().append(self)
        return self

    def __exit__(self, *exc_info):
        Graph._stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, tensor):
        self.nodes.append(tensor)

    @staticmethod
    def _stack():
        if not hasattr(Graph._local, 'stack'):
            Graph._local.stack = []
        return Graph._local.stack

    @staticmethod
    def current():
        stack = Graph._stack()
        return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array participating in the active graph."""
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.node_id = next(_NODE_IDS)
        self._parents = ()
        self._grad_fn = None
        graph = Graph.current()
        if graph is not None:
            graph.record(self)

    @classmethod
    def _result(cls, data, parents, grad_fn):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        out.node_id = next(_NODE_IDS)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._grad_fn = grad_fn if out.requires_grad else None
        graph = Graph.current()
        if graph is not None:
            graph.record(out)
        return out

    # ---- properties ----
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
    def is_leaf(self):
        return not self._parents

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __deepcopy__(self, memo):
        # copies are new leaves with their own node ids
        out = Tensor(self.data, requires_grad=self.requires_grad, name=self.name)
        memo[id(self)] = out
        return out

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- operators ----
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    # ---- method forms ----
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic (bias-style broadcasting only)
# ---------------------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'add')

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return Tensor._result(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'sub')

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return Tensor._result(a.data - b.data, (a, b), grad_fn)


def neg(a):
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'mul')

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return Tensor._result(a.data * b.data, (a, b), grad_fn)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, 'div')

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return Tensor._result(a.data / b.data, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g
    return Tensor._result(a.data @ b.data, (a, b), grad_fn)


def batched_vecmat(x, w):
    """Row-wise x_b @ W_b for x [B x i] and w [B x i x j]; a w batch of 1 is shared by all rows."""
    x, w = as_tensor(x), as_tensor(w)
    if (x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]
            or w.shape[0] not in (1, x.shape[0])):
        raise DimensionError(f"batched_vecmat shape mismatch: {x.shape} vs {w.shape}")

    out = np.matmul(x.data[:, None, :], w.data)[:, 0, :]

    def grad_fn(g):
        gx = np.matmul(g[:, None, :], np.swapaxes(w.data, 1, 2))[:, 0, :]
        gw = x.data[:, :, None] * g[:, None, :]
        if w.shape[0] == 1 and x.shape[0] != 1:
            gw = gw.sum(axis=0, keepdims=True)
        return gx, gw
    return Tensor._result(out, (x, w), grad_fn)


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return Tensor._result(a.data.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------
def relu(x):
    x = as_tensor(x)
    mask = (x.data > 0).astype(np.float64)
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return Tensor._result(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x):
    x = as_tensor(x)
    e = np.exp(x.data)
    return Tensor._result(e, (x,), lambda g: (g * e,))


def log(x):
    x = as_tensor(x)
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x):
    x = as_tensor(x)
    return Tensor._result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x, low, high):
    x = as_tensor(x)
    mask = ((x.data >= low) & (x.data <= high)).astype(np.float64)
    return Tensor._result(np.clip(x.data, low, high), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions and shape plumbing
# ---------------------------------------------------------------------------
def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return Tensor._result(out, (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ' vs '.join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat shape mismatch: {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, sizes, axis=axis))
    return Tensor._result(out, tensors, grad_fn)


def slice_last(x, start, stop):
    """x[..., start:stop]"""
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for shape {x.shape}")

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)
    return Tensor._result(x.data[..., start:stop], (x,), grad_fn)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return Tensor._result(out, (x,), lambda g: (g.reshape(x.shape),))


def repeat_rows(x, repeats):
    """Repeat every row `repeats` times along axis 0."""
    x = as_tensor(x)
    out = np.repeat(x.data, repeats, axis=0)

    def grad_fn(g):
        return (g.reshape((x.shape[0], repeats) + x.shape[1:]).sum(axis=1),)
    return Tensor._result(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------
def _reachable(root):
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in seen or not node.requires_grad:
            continue
        seen[node.node_id] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n.node_id, reverse=True)


def backward(loss):
    """Accumulate dLoss/dLeaf into `.grad` of every leaf reachable from `loss`."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {loss.node_id: np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad:
                continue
            if parent.node_id in pending:
                pending[parent.node_id] = pending[parent.node_id] + pg
            else:
                pending[parent.node_id] = pg


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------
def finite_difference_grad(fn, params, h=1e-6):
    """Central differences of scalar fn() with respect to each tensor in params (perturbed in place)."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            f_plus = fn().item()
            p.data[idx] = orig - h
            f_minus = fn().item()
            p.data[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-12))


def gradcheck(fn, params, h=1e-6):
    """Max relative error between autodiff and central differences over all params."""
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = finite_difference_grad(fn, params, h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
