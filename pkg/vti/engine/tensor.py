# vti/engine/tensor.py
"""
Dense Tensor with Define-by-Run Reverse-Mode Autodiff

A Tensor wraps a numpy array. While a Tape is active, every op whose inputs
require grad appends one entry (inputs, output, backward rule) to the tape;
Tape.backward replays the entries in reverse recording order.

Broadcasting is limited to cases where the result has the shape of one of the
operands (scalar with tensor, row-vector bias over rows, column over columns).
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from vti.core.errors import ContractViolation, DomainError

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("vti_dtype", default=np.float32)
_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("vti_tape", default=None)


def default_dtype():
    """Float type used for newly created tensors"""
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """
    Switch the default float type, e.g. ``with precision(np.float64):`` for gradient checks
    """
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    """
    n-dimensional float array with optional gradient tape participation

    Attributes:
        data: numpy array, row-major
        requires_grad: whether backward should populate grad
        grad: same-shape array once backward reached this tensor
        name: optional label (parameter name)
    """

    __array_priority__ = 1000  # keep numpy from hijacking reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


@dataclass
class TapeEntry:
    """One recorded op"""
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """
    Ordered record of the forward pass

    Use as a context manager; one tape per training step, confined to one thread.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Populate grad for every requires_grad tensor recorded on the tape

    Contributions from fan-out are summed; repeated calls accumulate into grad.

    Raises:
        ContractViolation: loss is not a scalar
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}

    for entry in reversed(tape.entries):
        for t in entry.inputs:
            if t.requires_grad:
                seen.setdefault(id(t), t)
        g_out = grads.get(id(entry.output))
        if g_out is None:
            continue
        input_grads = entry.backward(g_out)
        for t, g in zip(entry.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    for key, t in seen.items():
        if not t.requires_grad:
            continue
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.astype(t.data.dtype, copy=True) if t.grad is None else t.grad + g


# ============================================================================
# Recording helpers
# ============================================================================

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(TapeEntry(op, inputs, out, rule))
    return out


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a} and {b} are not compatible") from None
    if shape != a and shape != b:
        raise ContractViolation(f"{op}: shapes {a} and {b} would need mutual broadcasting")
    return shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to shape (inverse of numpy broadcasting)"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ============================================================================
# Elementwise ops
# ============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)

    def rule(g):
        return (g * c,)

    return _make("scale", x.data * c, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def rule(g):
        return (g * (1.0 - y * y),)

    return _make("tanh", y, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)

    def rule(g):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", y, (x,), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    return _make("relu", x.data * mask, (x,), rule)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def rule(g):
        return (g * y,)

    return _make("exp", y, (x,), rule)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")

    def rule(g):
        return (g / x.data,)

    return _make("log", np.log(x.data), (x,), rule)


def power(x: Tensor, p: float) -> Tensor:
    """x ** p for a constant exponent; inputs must be positive unless p is integral"""
    if not float(p).is_integer() and np.any(x.data <= 0):
        raise DomainError("fractional power of non-positive value")
    y = x.data ** p

    def rule(g):
        return (g * p * x.data ** (p - 1),)

    return _make("power", y, (x,), rule)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input was inside"""
    inside = (x.data >= lo) & (x.data <= hi)

    def rule(g):
        return (g * inside,)

    return _make("clamp", np.clip(x.data, lo, hi), (x,), rule)


def dropout(x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
    """
    Inverted dropout with a caller-supplied Bernoulli keep-mask

    Survivors are scaled by 1/(1 - rate).
    """
    mask = np.asarray(mask)
    if mask.shape != x.shape:
        raise ContractViolation(f"dropout: mask shape {mask.shape} != input shape {x.shape}")
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout: rate must be in [0, 1), got {rate}")
    factor = mask.astype(x.data.dtype) / (1.0 - rate)

    def rule(g):
        return (g * factor,)

    return _make("dropout", x.data * factor, (x,), rule)


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise_apply(x, fn: str, other=None, *, factor: float | None = None,
                      mask: np.ndarray | None = None, rate: float = 0.5) -> Tensor:
    """
    Dispatch an elementwise op by name

    fn is one of add, sub, mul (need other), tanh, sigmoid, relu, exp, log,
    scale (needs factor), dropout (needs mask, rate).
    """
    if fn in _BINARY:
        if other is None:
            raise ContractViolation(f"{fn} needs a second operand")
        return _BINARY[fn](x, other)
    if fn in _UNARY:
        return _UNARY[fn](as_tensor(x))
    if fn == "scale":
        if factor is None:
            raise ContractViolation("scale needs a factor")
        return scale(x, factor)
    if fn == "dropout":
        if mask is None:
            raise ContractViolation("dropout needs an explicit mask")
        return dropout(as_tensor(x), mask, rate)
    raise ContractViolation(f"unknown elementwise op {fn!r}")


# ============================================================================
# Linear algebra and reductions
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _make("matmul", a.data @ b.data, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ContractViolation(f"transpose needs rank 2, got {x.shape}")

    def rule(g):
        return (g.T,)

    return _make("transpose", x.data.T, (x,), rule)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"cannot reshape {x.shape} to {shape}") from None

    def rule(g):
        return (g.reshape(x.shape),)

    return _make("reshape", y, (x,), rule)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ContractViolation(f"cannot broadcast {x.shape} to {shape}") from None

    def rule(g):
        return (_unbroadcast(g, x.shape),)

    return _make("broadcast_to", y, (x,), rule)


def tensor_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(y), (x,), rule)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat of an empty list")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ContractViolation(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", y, tuple(tensors), rule)


def index(x: Tensor, key) -> Tensor:
    """
    Basic or integer-array indexing; backward scatter-adds, so repeated rows accumulate
    """
    try:
        y = x.data[key]
    except IndexError as e:
        raise ContractViolation(f"index out of range: {e}") from None

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", np.array(y), (x,), rule)


# ============================================================================
# Softmax family
# ============================================================================

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction)"""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def rule(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), rule)


# ============================================================================
# Convolution support
# ============================================================================

def _im2col_index(channels: int, height: int, width: int, kernel: int, stride: int, padding: int):
    hp, wp = height + 2 * padding, width + 2 * padding
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    oi = np.arange(ho) * stride
    oj = np.arange(wo) * stride
    k = np.arange(kernel)
    rows = oi[:, None, None, None, None] + k[None, None, None, :, None]
    cols = oj[None, :, None, None, None] + k[None, None, None, None, :]
    chan = np.arange(channels)[None, None, :, None, None]
    idx = chan * hp * wp + rows * wp + cols
    return idx.reshape(ho * wo, channels * kernel * kernel), (ho, wo)


def im2col(x: Tensor, kernel: int, stride: int, padding: int) -> Tensor:
    """
    Unfold a (C, H, W) tensor into (Ho*Wo, C*kernel*kernel) patches

    A convolution is then im2col(x) @ W with W of shape (C*kernel*kernel, C_out).
    """
    if x.ndim != 3:
        raise ContractViolation(f"im2col needs (C, H, W), got {x.shape}")
    c, h, w = x.shape
    idx, out_hw = _im2col_index(c, h, w, kernel, stride, padding)
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    y = padded.reshape(-1)[idx]

    def rule(g):
        flat = np.zeros(padded.size, dtype=g.dtype)
        np.add.at(flat, idx, g)
        full = flat.reshape(padded.shape)
        return (full[:, padding:padding + h, padding:padding + w],)

    out = _make("im2col", y, (x,), rule)
    out.spatial = out_hw  # (Ho, Wo) of the unfolded grid
    return out
