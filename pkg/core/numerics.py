# -*- coding: utf-8 -*-
""""""
"""
Dense float64 arrays with reverse-mode differentiation.

Every primitive below returns a new NDArray. When a Tape is active and one of
the inputs requires a gradient, the primitive records itself on the tape
together with a closure mapping the output gradient onto its input gradients.
backward() replays the tape in reverse recording order, which is a valid
reverse topological order because an output is always recorded after its
inputs.
"""
import logging
import threading

import numpy as np

from core.errors import DimensionError, NumericError, UsageError
from modules.setup_logger import logger


logger = logging.getLogger(__name__)

DTYPE = np.float64

_local = threading.local()


def generator(seed: int) -> np.random.Generator:
    """Counter based (Philox) generator used for initialization and dropout masks"""
    return np.random.Generator(np.random.Philox(seed))


class NDArray:
    """Immutable float64 array, optionally tracked by the active tape"""

    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: str = None) -> None:
        value = np.array(value, dtype=DTYPE)
        value.flags.writeable = False
        self._value = value
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, value: np.ndarray) -> 'NDArray':
        """Wrap a freshly computed array without copying it"""
        out = cls.__new__(cls)
        value = np.asarray(value, dtype=DTYPE)
        value.flags.writeable = False
        out._value = value
        out.requires_grad = False
        out.name = None
        return out

    @property
    def value(self) -> np.ndarray:
        """Read-only numpy view of the data"""
        return self._value

    @property
    def shape(self) -> tuple:
        return self._value.shape

    @property
    def ndim(self) -> int:
        return self._value.ndim

    @property
    def size(self) -> int:
        return self._value.size

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single element array, got shape {self.shape}")
        return float(self._value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"NDArray(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_array(x) -> NDArray:
    """Promote constants to (non differentiable) arrays"""
    if isinstance(x, NDArray):
        return x
    return NDArray(x)


class _Record:
    __slots__ = ('out', 'inputs', 'backward')

    def __init__(self, out, inputs, backward) -> None:
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Ordered record of the primitives evaluated while the tape is active.

    Use as a context manager; tapes nest per thread, the innermost one records.
    """

    def __init__(self) -> None:
        self._records = []

    def __enter__(self) -> 'Tape':
        stack = getattr(_local, 'stack', None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list:
        return self._records

    def record(self, out: NDArray, inputs: tuple, backward) -> None:
        self._records.append(_Record(out, inputs, backward))


def active_tape():
    stack = getattr(_local, 'stack', None)
    return stack[-1] if stack else None


def _result(value, inputs: tuple, backward) -> NDArray:
    out = NDArray._wrap(value)
    tape = active_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back onto the operand shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: NDArray, b: NDArray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"Cannot broadcast shapes {a.shape} and {b.shape}")


def backward(tape: Tape, loss: NDArray, wrt=None) -> dict:
    """
    Reverse pass over a tape

    :param tape: Tape the loss was computed on
    :param loss: Single element array
    :param wrt: Optional arrays that must appear in the result, zero if unused

    :returns: Mapping learnable NDArray -> gradient (numpy array of its shape)
    """
    if loss.size != 1:
        raise UsageError(f"Loss must be a scalar, got shape {loss.shape}")

    grads = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    produced = set()
    leaves = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss

    for rec in tape.records:
        produced.add(id(rec.out))
        for x in rec.inputs:
            if x.requires_grad:
                leaves.setdefault(id(x), x)

    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        if id(rec.out) != id(loss):
            del grads[id(rec.out)]
        for x, gx in zip(rec.inputs, rec.backward(g)):
            if gx is None or not x.requires_grad:
                continue
            key = id(x)
            grads[key] = grads[key] + gx if key in grads else gx

    result = {}
    for key, leaf in leaves.items():
        if key in produced:
            continue
        g = grads.get(key)
        result[leaf] = g if g is not None else np.zeros(leaf.shape, dtype=DTYPE)
    for leaf in wrt or ():
        if leaf not in result:
            result[leaf] = np.zeros(leaf.shape, dtype=DTYPE)
    return result


##################### ELEMENTWISE #########################

def add(a, b) -> NDArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.value + b.value, (a, b), _backward)


def subtract(a, b) -> NDArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.value - b.value, (a, b), _backward)


def multiply(a, b) -> NDArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)

    def _backward(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)
    return _result(a.value * b.value, (a, b), _backward)


def divide(a, b) -> NDArray:
    a, b = as_array(a), as_array(b)
    _broadcast_shape(a, b)
    out = a.value / b.value

    def _backward(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))
    return _result(out, (a, b), _backward)


def scale(x, factor: float) -> NDArray:
    x = as_array(x)
    factor = float(factor)

    def _backward(g):
        return (g * factor,)
    return _result(x.value * factor, (x,), _backward)


def sin(x) -> NDArray:
    x = as_array(x)

    def _backward(g):
        return (g * np.cos(x.value),)
    return _result(np.sin(x.value), (x,), _backward)


def relu(x) -> NDArray:
    x = as_array(x)
    mask = x.value > 0

    def _backward(g):
        return (g * mask,)
    return _result(np.where(mask, x.value, 0.0), (x,), _backward)


##################### SHAPE #########################

def transpose(x, axes: tuple = None) -> NDArray:
    """Permute axes, default swaps the last two"""
    x = as_array(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 dimensions, got {x.ndim}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(x.value, axes), (x,), _backward)


def reshape(x, shape: tuple) -> NDArray:
    x = as_array(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise DimensionError(f"Cannot reshape {x.shape} into {shape}")

    def _backward(g):
        return (g.reshape(x.shape),)
    return _result(out, (x,), _backward)


def concatenate(arrays, axis: int = -1) -> NDArray:
    arrays = tuple(as_array(a) for a in arrays)
    try:
        out = np.concatenate([a.value for a in arrays], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"Cannot concatenate: {exc}")
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result(out, arrays, _backward)


##################### REDUCTIONS #########################

def reduce_sum(x, axis=None, keepdims: bool = False) -> NDArray:
    x = as_array(x)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(x.value.sum(axis=axis, keepdims=keepdims), (x,), _backward)


def mean(x, axis=None, keepdims: bool = False) -> NDArray:
    x = as_array(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _result(x.value.mean(axis=axis, keepdims=keepdims), (x,), _backward)


def reduce_max(x, axis: int, keepdims: bool = False) -> NDArray:
    """Maximum along one axis, gradient routed to the first maximal entry"""
    x = as_array(x)
    idx = np.expand_dims(np.argmax(x.value, axis=axis), axis)
    out = np.take_along_axis(x.value, idx, axis=axis)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)
    return _result(out if keepdims else np.squeeze(out, axis=axis), (x,), _backward)


##################### LINEAR ALGEBRA #########################

def matmul(a, b) -> NDArray:
    """
    Matrix product over the last two axes, leading axes broadcast

    :param a: [..., m, k]
    :param b: [..., k, n]
    """
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.value, b.value)
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(out, (a, b), _backward)


def affine(x, weight, bias=None) -> NDArray:
    """
    Dense layer x @ weight + bias applied over the last axis

    :param x: [..., n_in]
    :param weight: [n_in, n_out]
    :param bias: [n_out] or None
    """
    x, weight = as_array(x), as_array(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"affine: input {x.shape} does not fit weight {weight.shape}")
    out = x.value @ weight.value
    inputs = (x, weight)
    if bias is not None:
        bias = as_array(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"affine: bias {bias.shape} does not fit weight {weight.shape}")
        out = out + bias.value
        inputs = (x, weight, bias)

    def _backward(g):
        gx = g @ weight.value.T
        gw = x.value.reshape(-1, weight.shape[0]).T @ g.reshape(-1, weight.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, weight.shape[1]).sum(axis=0)
    return _result(out, inputs, _backward)


##################### NORMALIZATION #########################

def softmax(x, axis: int = -1) -> NDArray:
    """Numerically stable softmax (max subtraction)"""
    x = as_array(x)
    if not np.isfinite(x.value).all():
        raise NumericError("softmax input contains NaN or infinite values")
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return _result(s, (x,), _backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> NDArray:
    """
    Normalize over the last axis, then scale and shift

    :param x: [..., d]
    :param gain: [d]
    :param bias: [d]
    :param eps: Added to the variance, must be positive
    """
    x, gain, bias = as_array(x), as_array(gain), as_array(bias)
    if eps <= 0:
        raise UsageError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not fit width {d}")
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def _backward(g):
        dxhat = g * gain.value
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias
    return _result(xhat * gain.value + bias.value, (x, gain, bias), _backward)


def dropout(x, p: float, rng: np.random.Generator = None, training: bool = True) -> NDArray:
    """
    Inverted dropout: kept entries are divided by the keep probability

    Outside training (or with p == 0) the input is passed through unchanged.
    """
    x = as_array(x)
    if not 0 <= p < 1:
        raise UsageError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def _backward(g):
        return (g * mask,)
    return _result(x.value * mask, (x,), _backward)


##################### GRADIENT CHECK #########################

def _evaluate(f, point: np.ndarray) -> float:
    out = f(NDArray(point))
    if out.size != 1:
        raise UsageError(f"gradient_check needs a scalar valued map, got shape {out.shape}")
    value = out.item()
    if not np.isfinite(value):
        raise NumericError(f"Non-finite evaluation {value} during gradient check")
    return value


def gradient_check(f, point, h: float = 1e-6) -> float:
    """
    Compare tape gradients with central finite differences

    :param f: Map NDArray -> scalar NDArray built from the primitives above
    :param point: Where to differentiate
    :param h: Step, in [1e-6, 1e-4]

    :returns: max over coordinates of |analytic - numeric| / max(1, |analytic|)
    """
    if not 1e-6 <= h <= 1e-4:
        raise UsageError(f"Finite difference step must be in [1e-6, 1e-4], got {h}")
    point = np.array(point, dtype=DTYPE)
    x = NDArray(point, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    analytic = backward(tape, y, wrt=[x])[x]
    if not np.isfinite(analytic).all():
        raise NumericError("Non-finite analytic gradient during gradient check")

    flat = point.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = _evaluate(f, point)
        flat[i] = orig - h
        f_minus = _evaluate(f, point)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2 * h)

    analytic = analytic.reshape(-1)
    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(error.max()) if error.size else 0.0
