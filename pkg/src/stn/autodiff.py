"""A small reverse-mode autodiff engine over NumPy arrays.

Only the operations needed by the encoder, the metric heads and the
cross-entropy losses are provided. Graphs are built eagerly; ``backward``
walks them in reverse topological order and accumulates ``.grad``.
"""
import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological(root):
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, parents=(a, b), backward=backward)


def neg(a):
    return Tensor(-a.data, parents=(a,), backward=lambda g: a._accumulate(-g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, parents=(a, b), backward=backward)


def reciprocal(a):
    out = 1.0 / a.data
    return Tensor(out, parents=(a,), backward=lambda g: a._accumulate(-g * out * out))


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return Tensor(a.data**exponent, parents=(a,), backward=backward)


def exp(a):
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: a._accumulate(g * out))


def log(a):
    return Tensor(np.log(a.data), parents=(a,), backward=lambda g: a._accumulate(g / a.data))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: a._accumulate(0.5 * g / out))


def tabs(a):
    return Tensor(np.abs(a.data), parents=(a,), backward=lambda g: a._accumulate(g * np.sign(a.data)))


def clamp_min(a, floor):
    """``max(a, floor)`` with zero gradient where the floor is active."""
    active = a.data > floor
    return Tensor(
        np.where(active, a.data, floor),
        parents=(a,),
        backward=lambda g: a._accumulate(np.where(active, g, 0.0)),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-d")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, parents=(a, b), backward=backward)


def tsum(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), backward=backward)


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    return Tensor(
        a.data.reshape(shape),
        parents=(a,),
        backward=lambda g: a._accumulate(g.reshape(a.shape)),
    )


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inverse = np.argsort(axes)
    return Tensor(
        np.transpose(a.data, axes),
        parents=(a,),
        backward=lambda g: a._accumulate(np.transpose(g, inverse)),
    )


def getitem(a, index):
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return Tensor(a.data[index], parents=(a,), backward=backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward=backward,
    )


def broadcast_to(a, shape):
    return Tensor(
        np.broadcast_to(a.data, shape).copy(),
        parents=(a,),
        backward=lambda g: a._accumulate(_unbroadcast(g, a.shape)),
    )


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, parents=(a,), backward=backward)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return Tensor(out, parents=(a,), backward=backward)


def layer_norm(x, weight, bias, eps=1e-6):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    c = x.shape[-1]

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(_unbroadcast(g * xhat, weight.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * weight.data
            x._accumulate(
                inv
                * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / c)
            )

    return Tensor(out, parents=(x, weight, bias), backward=backward)


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        a._accumulate(g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)))

    return Tensor(x * cdf, parents=(a,), backward=backward)


def cross_entropy_from_distances(distances, labels):
    """Mean negative log of softmax(-distances) at the true labels."""
    labels = np.asarray(labels)
    logp = log_softmax(neg(distances), axis=-1)
    picked = getitem(logp, (np.arange(len(labels)), labels))
    return neg(mean(picked))
