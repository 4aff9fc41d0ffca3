"""
Dense float64 tensors with reverse-mode automatic differentiation

Every op returns a new Tensor. When gradient recording is enabled and any
input requires a gradient, the result remembers its parents and a closure
that pushes the upstream gradient back to them; ``backward`` walks the
recorded graph in reverse topological order.
"""

import contextlib
import contextvars
import math

import numpy as np

from cilkit.errors import DataError, NumericalError, ShapeError

# per thread and per asyncio task
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, statistics)"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled():
    return _grad_enabled.get()


class Tensor:
    """Row-major float64 array plus optional gradient"""

    def __init__(self, data, requires_grad=False):
        array = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            raise NumericalError(f"non-finite value in tensor of shape {array.shape}")
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""

    def __repr__(self):
        grad = " requires_grad" if self.requires_grad else ""
        return f"<Tensor shape={self.shape}{grad}>"

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
    def flat(self):
        """Row-major flat view of the values"""
        return self.data.reshape(-1)

    def item(self):
        if self.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64).reshape(self.shape)
        else:
            self.grad = self.grad + grad

    # Operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, op, backward):
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"operands of {op} do not conform", a.shape, b.shape) from None


# Elementwise
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericalError("division by zero")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data**2), b.shape))

    return _result(a.data / b.data, (a, b), "div", backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def absolute(x):
    x = as_tensor(x)

    def backward(g):
        # subgradient 0 at exact zeros
        x._accumulate(g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), "abs", backward)


def exp(x):
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out_data)

    return _result(out_data, (x,), "exp", backward)


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("log of a non-positive value")

    def backward(g):
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), "log", backward)


# Reductions
def tensor_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum", backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape) / count)

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), "mean", backward)


def l1_norm(x):
    """Entrywise sum of absolute values"""
    return tensor_sum(absolute(x))


# Shape manipulation
def reshape(x, shape):
    x = as_tensor(x)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("cannot reshape", x.shape, shape) from None

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(out_data, (x,), "reshape", backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), "transpose", backward)


def swap_last(x):
    """Transpose the last two axes"""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("cannot concatenate", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                t._accumulate(g[tuple(index)])

    return _result(out_data, tensors, "concat", backward)


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out_data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("cannot broadcast", x.shape, shape) from None

    def backward(g):
        x._accumulate(_unbroadcast(g, x.shape))

    return _result(out_data, (x,), "broadcast_to", backward)


def select(x, index, axis):
    """Pick one position along ``axis`` (drops that axis)"""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros(x.shape)
        slot = [slice(None)] * x.ndim
        slot[axis] = index
        full[tuple(slot)] = g
        x._accumulate(full)

    return _result(np.take(x.data, index, axis=axis), (x,), "select", backward)


# Linear algebra
def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul operands do not conform", a.shape, b.shape)
    try:
        out_data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul batch dimensions do not conform", a.shape, b.shape) from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out_data, (a, b), "matmul", backward)


# Normalisation and probabilities
def _softmax_data(data, axis):
    shifted = data - data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis=-1):
    x = as_tensor(x)
    s = _softmax_data(x.data, axis)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (x,), "softmax", backward)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        x._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _result(out_data, (x,), "log_softmax", backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift"""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError("layer_norm gain/bias must match the last axis", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv_std

    def backward(g):
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = (
                inv_std
                / width
                * (
                    width * dxhat
                    - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
                )
            )
            x._accumulate(dx)
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, width).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, width).sum(axis=0))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", backward)


def scaled_dot_product_attention(q, k, v):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes"""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("attention operands do not conform", q.shape, k.shape, v.shape)
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def cross_entropy(logits, labels):
    """Mean natural-log cross-entropy of softmax(logits) against integer labels"""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("cross_entropy expects (N, K) logits and N labels", logits.shape, labels.shape)
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    n = labels.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        logits._accumulate(g * grad / n)

    return _result(loss, (logits,), "cross_entropy", backward)


# Backward pass
def _topological_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss, inputs=None):
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``

    Args:
        loss: scalar Tensor
        inputs: optional leaves that must end up with a populated gradient
            even when the loss does not depend on them (they receive zeros)
    """
    if loss.size != 1:
        raise ShapeError("backward requires a scalar loss", loss.shape)

    if loss.requires_grad:
        order = _topological_order(loss)
        for node in order:
            if node._backward is not None:
                node.grad = None
        loss.grad = np.ones(loss.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    for leaf in inputs or ():
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros(leaf.shape)


def numerical_gradient(fn, tensor, h=1e-5):
    """
    Central finite-difference gradient of scalar ``fn()`` w.r.t. ``tensor``

    The tensor's values are perturbed in place and restored.
    """
    grad = np.zeros(tensor.shape)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        with no_grad():
            upper = fn().item()
        flat[i] = original - h
        with no_grad():
            lower = fn().item()
        flat[i] = original
        out[i] = (upper - lower) / (2.0 * h)
    return grad
