"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine builds a tape dynamically during the forward pass: every
operation records its parents and a closure that routes the output
gradient back to them.  ``Tensor.backward()`` topologically sorts the
tape and runs the closures in reverse.  Only first-order gradients are
supported, and everything is double precision so that central-difference
checks are meaningful.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

SIGMOID_CLAMP_EPS = 1e-5


class Tensor:
    """A dense array node in the computation graph.

    Values are always stored as float64.  ``grad`` stays ``None`` until
    a backward pass reaches this node.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: Sequence["Tensor"],
            backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            # copy, not alias: closures may hand us views of live buffers
            if grad.shape != self.data.shape:
                grad = np.broadcast_to(grad, self.data.shape)
            self.grad = np.array(grad)
        else:
            self.grad += grad

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Run reverse-mode differentiation from this node.

        Without an explicit seed the node must be scalar-sized; the seed
        is then one.
        """
        if seed is None:
            if self.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    @staticmethod
    def _wrap(value) -> "Tensor":
        return value if isinstance(value, Tensor) else Tensor(value)

    def __add__(self, other):
        other = Tensor._wrap(other)
        data = self.data + other.data

        def backward(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._op(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)

        return Tensor._op(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)
        data = self.data * other.data

        def backward(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._op(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other)
        data = self.data / other.data

        def backward(g):
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor._op(data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._wrap(other) / self

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        data = self.data**exponent

        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._op(data, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._wrap(other)
        a, b = self, other
        if a.ndim == 1:
            return (a.reshape(1, -1) @ b).reshape(*b.shape[:-2], b.shape[-1]) \
                if b.ndim >= 2 else (a.reshape(1, -1) @ b.reshape(-1, 1)).reshape(())
        if b.ndim == 1:
            return (a @ b.reshape(-1, 1)).reshape(*a.shape[:-1])
        data = np.matmul(a.data, b.data)

        def backward(g):
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

        return Tensor._op(data, (a, b), backward)

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        old_shape = self.shape

        def backward(g):
            self._accumulate(g.reshape(old_shape))

        return Tensor._op(data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or None
        data = np.transpose(self.data, axes)
        inverse = np.argsort(axes) if axes else None

        def backward(g):
            self._accumulate(np.transpose(g, inverse))

        return Tensor._op(data, (self,), backward)

    def __getitem__(self, index):
        data = self.data[index]
        shape = self.shape
        # basic indexing selects each element at most once, so the
        # scatter can be a plain in-place add; fancy indices may repeat
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(p, (int, slice, type(None), type(Ellipsis)))
                    for p in parts)

        def backward(g):
            full = np.zeros(shape)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            self._accumulate(full)

        return Tensor._op(data, (self,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))

        return Tensor._op(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise functions -------------------------------------------------


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        x._accumulate(g * data)

    return Tensor._op(data, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g / x.data)

    return Tensor._op(np.log(x.data), (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / data)

    return Tensor._op(data, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._op(x.data * mask, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g):
        x._accumulate(g * sign)

    return Tensor._op(np.abs(x.data), (x,), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    take_a = a.data >= b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * take_a, a.shape))
        b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return Tensor._op(np.maximum(a.data, b.data), (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = Tensor._wrap(a), Tensor._wrap(b)
    take_a = a.data <= b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * take_a, a.shape))
        b._accumulate(_unbroadcast(g * ~take_a, b.shape))

    return Tensor._op(np.minimum(a.data, b.data), (a, b), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    passthrough = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x._accumulate(g * passthrough)

    return Tensor._op(np.clip(x.data, lo, hi), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1 / (1 + e^{ -x }), overflow-safe in both tails."""
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        x._accumulate(g * data * (1.0 - data))

    return Tensor._op(data, (x,), backward)


def inverse_sigmoid(y: Tensor, eps: float = SIGMOID_CLAMP_EPS) -> Tensor:
    """ln(y / (1 - y)) on input clamped to [eps, 1 - eps]."""
    yc = clip(y, eps, 1.0 - eps)
    return log(yc) - log(1.0 - yc)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exponentials normalized along ``axis``, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - inner))

    return Tensor._op(data, (x,), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    One tape node instead of the eight a composed version costs; this
    sits on the hot path of every encoder and decoder layer.
    """
    weight, bias = Tensor._wrap(weight), Tensor._wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    scale = 1.0 / np.sqrt(var + eps)
    normed = centered * scale

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        weight._accumulate((g * normed).sum(axis=lead))
        bias._accumulate(g.sum(axis=lead))
        gn = g * weight.data
        x._accumulate(scale * (gn - gn.mean(axis=-1, keepdims=True)
                               - normed * (gn * normed).mean(axis=-1, keepdims=True)))

    return Tensor._op(normed * weight.data + bias.data, (x, weight, bias), backward)


# -- structural helpers ----------------------------------------------------


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(g[tuple(index)])

    return Tensor._op(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return Tensor._op(data, tensors, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias, with weight laid out (out_features, in_features)."""
    out = x @ weight.transpose()
    return out if bias is None else out + bias


# -- validation oracle -----------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function of ``x``.

    ``f`` must be deterministic; it receives a fresh constant tensor per
    evaluation so no graph state leaks between probes.
    """
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        for s, sign in ((h, +1.0), (-h, -1.0)):
            probe = base.copy()
            probe.reshape(-1)[i] += s
            value = f(Tensor(probe))
            value = value.item() if isinstance(value, Tensor) else float(value)
            flat[i] += sign * value
        flat[i] /= 2.0 * h
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Worst-case elementwise |a - b| / max(|a|, |b|, 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
