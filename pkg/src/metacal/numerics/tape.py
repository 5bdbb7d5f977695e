"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Tensor` values
together with the forward function and a vector-Jacobian product.  Nodes are
appended in creation order, which is already a topological order, so the
backward pass is a single reversed sweep.

The module-level functions (``exp``, ``tanh``, ``matmul`` ...) dispatch on
their arguments: if any argument is a :class:`Tensor` the operation is
recorded on that tensor's tape, otherwise plain numpy is evaluated.  Model code
written against these functions therefore runs unchanged for training (on a
tape) and for inference (on bare arrays).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special

Array = np.ndarray

_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


class Tensor:
    """A value living on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, tape: "Tape", index: int, value: Array, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.index})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)


class _Node:
    __slots__ = ("parents", "forward", "vjp")

    def __init__(self, parents, forward, vjp):
        self.parents = parents
        self.forward = forward
        self.vjp = vjp


class Tape:
    """Append-only record of primitive operations.

    One tape per forward/backward pass; tapes are not shared between threads.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tensors: list[Tensor] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, value) -> Tensor:
        """Register a leaf that receives a gradient."""
        return self._leaf(value, True)

    def constant(self, value) -> Tensor:
        return self._leaf(value, False)

    def _leaf(self, value, requires_grad: bool) -> Tensor:
        value = np.array(value, dtype=np.float64)
        t = Tensor(self, len(self._nodes), value, requires_grad)
        self._nodes.append(_Node((), None, None))
        self._tensors.append(t)
        return t

    def apply(self, forward: Callable, vjp: Callable, *inputs) -> Tensor:
        parents = []
        for x in inputs:
            if isinstance(x, Tensor):
                if x.tape is not self:
                    raise ValueError("cannot mix tensors from different tapes")
                parents.append(x)
            else:
                parents.append(self.constant(x))
        value = forward(*(p.value for p in parents))
        requires_grad = any(p.requires_grad for p in parents)
        t = Tensor(self, len(self._nodes), value, requires_grad)
        self._nodes.append(_Node(tuple(p.index for p in parents), forward, vjp))
        self._tensors.append(t)
        return t

    def backward(self, output: Tensor, wrt: Sequence[Tensor] | None = None):
        """Propagate d(output)/d(node) for a scalar ``output``.

        Returns the gradients of ``wrt`` (a list, in order) or, if ``wrt`` is
        omitted, a dict mapping every variable leaf to its gradient.  Leaves
        not reachable from ``output`` get zeros.
        """
        if output.tape is not self:
            raise ValueError("output does not belong to this tape")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, Array] = {output.index: np.ones_like(output.value)}
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            node = self._nodes[i]
            if g is None or node.vjp is None:
                continue
            parents = [self._tensors[j] for j in node.parents]
            if not any(p.requires_grad for p in parents):
                continue
            pgrads = node.vjp(g, self._tensors[i].value, *(p.value for p in parents))
            for p, pg in zip(parents, pgrads):
                if not p.requires_grad or pg is None:
                    continue
                pg = _unbroadcast(pg, p.value.shape)
                if p.index in grads:
                    grads[p.index] = grads[p.index] + pg
                else:
                    grads[p.index] = pg
        if wrt is None:
            return {t: grads.get(t.index, np.zeros_like(t.value))
                    for t in self._tensors if t.requires_grad and self._nodes[t.index].vjp is None}
        return [grads.get(t.index, np.zeros_like(t.value)) for t in wrt]

    def replay(self) -> list[Array]:
        """Recompute every node's value from the leaves, in recorded order."""
        values: list[Array] = []
        for node, t in zip(self._nodes, self._tensors):
            if node.forward is None:
                values.append(t.value)
            else:
                values.append(node.forward(*(values[j] for j in node.parents)))
        return values


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    grad = np.asarray(grad)
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _find_tape(args) -> Tape | None:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    return None


def _primitive(forward: Callable, vjp: Callable) -> Callable:
    def op(*args):
        tape = _find_tape(args)
        if tape is None:
            return forward(*(np.asarray(a, dtype=np.float64) for a in args))
        return tape.apply(forward, vjp, *args)
    return op


def value_of(x) -> Array:
    """Strip the tape from ``x`` (a no-op on arrays)."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# elementwise arithmetic

add = _primitive(np.add, lambda g, out, a, b: (g, g))
sub = _primitive(np.subtract, lambda g, out, a, b: (g, -g))
mul = _primitive(np.multiply, lambda g, out, a, b: (g * b, g * a))
div = _primitive(np.divide, lambda g, out, a, b: (g / b, -g * out / b))
neg = _primitive(np.negative, lambda g, out, a: (-g,))
exp = _primitive(np.exp, lambda g, out, a: (g * out,))
log = _primitive(np.log, lambda g, out, a: (g / a,))
sqrt = _primitive(np.sqrt, lambda g, out, a: (0.5 * g / out,))
tanh = _primitive(np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
absolute = _primitive(np.abs, lambda g, out, a: (g * np.sign(a),))
square = _primitive(np.square, lambda g, out, a: (2.0 * g * a,))


def _softplus(a):
    return np.logaddexp(0.0, a)


def _logistic(a):
    return special.expit(a)


softplus = _primitive(_softplus, lambda g, out, a: (g * special.expit(a),))
logistic = _primitive(_logistic, lambda g, out, a: (g * out * (1.0 - out),))

# Derivative is the closed form 2/sqrt(pi) exp(-x^2), not the derivative of
# the rational approximation behind scipy's erf.
erf = _primitive(special.erf, lambda g, out, a: (g * _TWO_OVER_SQRT_PI * np.exp(-a * a),))


def power(a, exponent: float):
    exponent = float(exponent)
    return _primitive(
        lambda x: np.power(x, exponent),
        lambda g, out, x: (g * exponent * np.power(x, exponent - 1.0),),
    )(a)


# reductions and shape manipulation

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001
    return _primitive(
        lambda x: np.sum(x, axis=axis, keepdims=keepdims),
        lambda g, out, x: (_expand_reduced(g, x.shape, axis, keepdims),),
    )(a)


def mean(a, axis=None, keepdims: bool = False):
    def vjp(g, out, x):
        n = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
        return (_expand_reduced(g, x.shape, axis, keepdims) / n,)
    return _primitive(lambda x: np.mean(x, axis=axis, keepdims=keepdims), vjp)(a)


def reshape(a, shape):
    return _primitive(
        lambda x: np.reshape(x, shape),
        lambda g, out, x: (np.reshape(g, x.shape),),
    )(a)


def expand_dims(a, axis: int):
    return _primitive(
        lambda x: np.expand_dims(x, axis),
        lambda g, out, x: (np.reshape(g, x.shape),),
    )(a)


def swap_last(a):
    """Transpose the two trailing axes."""
    return _primitive(
        lambda x: np.swapaxes(x, -1, -2),
        lambda g, out, x: (np.swapaxes(g, -1, -2),),
    )(a)


def getitem(a, key):
    def vjp(g, out, x):
        full = np.zeros_like(x)
        np.add.at(full, key, g)
        return (full,)
    return _primitive(lambda x: x[key], vjp)(a)


def concatenate(arrays: Sequence, axis: int = 0):
    def forward(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, out, *xs):
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=axis))
    return _primitive(forward, vjp)(*arrays)


def take_along_axis(a, indices: Array, axis: int = -1):
    """Gather with constant integer ``indices`` (e.g. a sort permutation)."""
    indices = np.asarray(indices)

    def vjp(g, out, x):
        full = np.zeros_like(x)
        np.put_along_axis(full, indices, g, axis=axis)
        return (full,)
    return _primitive(lambda x: np.take_along_axis(x, indices, axis=axis), vjp)(a)


def _matmul_vjp(g, out, a, b):
    return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g


matmul = _primitive(np.matmul, _matmul_vjp)
