"""Small reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for the encoder stack and its losses: elementwise
arithmetic, matmul (batched), reductions, a few nonlinearities, shape ops,
and row gathers. Gradients follow the dtype of the forward computation, so a
float64 model yields float64 gradients suitable for finite-difference checks.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit as _expit

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)

_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (undo numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            # copy: the incoming array may be aliased by another node's grad
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    def _wrap(self, other) -> "Tensor":
        """Wrap scalars/arrays in this tensor's dtype (avoid f64 upcasts)."""
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self._wrap(other)
        out = _make(self.data + other.data, (self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return _finish(out, backward)

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return _finish(out, backward)

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)
        out = _make(self.data * other.data, (self, other))

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return _finish(out, backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._wrap(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return self._wrap(other) * self ** -1.0

    def __pow__(self, exponent: float):
        out = _make(self.data ** exponent, (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return _finish(out, backward)

    def __matmul__(self, other):
        other = self._wrap(other)
        out = _make(self.data @ other.data, (self, other))

        def backward(g):
            if self.requires_grad:
                ga = g @ other.data.swapaxes(-1, -2)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = self.data.swapaxes(-1, -2) @ g
                other._accumulate(_unbroadcast(gb, other.shape))

        return _finish(out, backward)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        out = _make(self.data.reshape(*shape), (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(self.shape))

        return _finish(out, backward)

    def transpose(self, *axes):
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inverse = np.argsort(axes)
        out = _make(self.data.transpose(*axes), (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.transpose(*inverse))

        return _finish(out, backward)

    def __getitem__(self, idx):
        # basic (slice/int) indexing only; use take_pairs for fancy gathers
        out = _make(self.data[idx], (self,))

        def backward(g):
            if self.requires_grad:
                buf = np.zeros_like(self.data)
                buf[idx] += g
                self._accumulate(buf)

        return _finish(out, backward)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return _finish(out, backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        value = np.exp(self.data)
        out = _make(value, (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * value)

        return _finish(out, backward)

    def log(self):
        out = _make(np.log(self.data), (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        return _finish(out, backward)

    def sqrt(self):
        value = np.sqrt(self.data)
        out = _make(value, (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / value)

        return _finish(out, backward)

    def erf(self):
        out = _make(_erf(self.data), (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 2.0 * _INV_SQRT_PI * np.exp(-self.data * self.data))

        return _finish(out, backward)

    def softplus(self):
        out = _make(np.logaddexp(0.0, self.data), (self,))

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * _expit(self.data))

        return _finish(out, backward)


def _make(data: np.ndarray, parents) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=parents if requires else ())


def _finish(out: Tensor, backward) -> Tensor:
    if out.requires_grad:
        out._backward = backward
    return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def take_pairs(t: Tensor, rows, cols) -> Tensor:
    """Gather t[rows[i], cols[i]] for each i, differentiably."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = _make(t.data[rows, cols], (t,))

    def backward(g):
        if t.requires_grad:
            buf = np.zeros_like(t.data)
            np.add.at(buf, (rows, cols), g)
            t._accumulate(buf)

    return _finish(out, backward)


# -- composites -----------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * ((x * (1.0 / _SQRT2)).erf() + 1.0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.data.max(axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.data.max(axis=axis, keepdims=True)
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    peak = x.data.max(axis=axis, keepdims=True)
    out = (x - peak).exp().sum(axis=axis, keepdims=True).log() + peak
    if not keepdims:
        out = out.reshape(tuple(s for i, s in enumerate(out.shape) if i != (axis % len(out.shape))))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gamma + beta
