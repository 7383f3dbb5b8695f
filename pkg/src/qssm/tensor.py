"""Minimal dense tensor with reverse-mode autodiff on an explicit tape.

Values are stored as contiguous float64 numpy arrays. Operations record
nodes on the currently active :class:`Tape`; ``backward`` replays them in
reverse, accumulating gradients additively into ``requires_grad`` leaves.
Nonstandard backward rules (quantizer surrogates, the selective scan) are
plugged in through :class:`CustomGradNode`.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy.special import erf


class NumericError(ArithmeticError):
    """Raised when an operation would produce NaN (division by zero, etc.)."""


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tape:
    """Ordered record of operations for one forward/backward pass.

    Single-threaded: one pass owns one tape. Use as a context manager;
    operations record themselves only while a tape is active and at least
    one input requires gradients.
    """

    _active: Optional["Tape"] = None

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = None

    def backward(self, loss: "Tensor") -> None:
        backward(self, loss)

    def first_nonfinite_node(self) -> Optional[str]:
        """Name of the earliest recorded node with a non-finite output, if any."""
        for i, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.output.data)):
                return f"node#{i}:{node.name}"
        return None


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "name")

    def __init__(self, inputs, output, backward_fn, name):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """Dense n-dimensional float64 value, optionally carrying a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn, name: str) -> Tensor:
    out = Tensor(out_data)
    tape = Tape._active
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn, name))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.data == 0.0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record((a, b), out, bw, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _record((a,), out, bw, "exp")


def expm1(a) -> Tensor:
    a = as_tensor(a)
    out = np.expm1(a.data)

    def bw(g):
        return (g * np.exp(a.data),)

    return _record((a,), out, bw, "expm1")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def bw(g):
        # subgradient 0 at the kink
        return (g * np.sign(a.data),)

    return _record((a,), out, bw, "abs")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        return (np.where(out > 0.0, g * 0.5 / np.where(out > 0.0, out, 1.0), 0.0),)

    return _record((a,), out, bw, "sqrt")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _record((a,), out, bw, "clamp")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record((a,), out, bw, "sigmoid")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = x * s

    def bw(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _record((a,), out, bw, "silu")


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record((a,), out, bw, "gelu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)

    def bw(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * s,)

    return _record((a,), out, bw, "softplus")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "abs": absolute,
    "sqrt": sqrt,
    "clamp": clamp,
}


def elementwise(op_kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch by name over the core elementwise operation set."""
    if op_kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("exp", "abs", "sqrt"):
        return fn(a)
    if op_kind == "clamp":
        return fn(a, **kwargs)
    return fn(a, b)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """a @ b for a of shape (..., m, k) and b of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ValueError("matmul expects a with ndim >= 2 and a 2-d right operand")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T
        k = a.shape[-1]
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record((a, b), out, bw, "matmul")


# -- reductions ---------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum())

    def bw(g):
        return (np.broadcast_to(g, a.shape).copy() if a.shape else np.asarray(g),)

    return _record((a,), out, bw, "sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bw(g):
        return (np.full(a.shape, float(g) / n),)

    return _record((a,), out, bw, "mean")


def sum_axis(a, axis: int, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record((a,), out, bw, "sum_axis")


def mean_axis(a, axis: int, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy() / n,)

    return _record((a,), out, bw, "mean_axis")


def _extremum(a, argfn, name):
    a = as_tensor(a)
    if a.data.size == 0:
        raise ValueError(f"{name} of empty tensor")
    flat_idx = argfn(a.data)
    out = np.asarray(a.data.reshape(-1)[flat_idx])

    def bw(g):
        ga = np.zeros(a.shape)
        ga.reshape(-1)[flat_idx] = float(g)
        return (ga,)

    return _record((a,), out, bw, name)


def min_all(a) -> Tensor:
    """Global minimum; gradient routes to the first attaining element."""
    return _extremum(a, np.argmin, "min")


def max_all(a) -> Tensor:
    return _extremum(a, np.argmax, "max")


# -- shape manipulation --------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _record((a,), out, bw, "reshape")


def permute(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _record((a,), out, bw, "permute")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(tuple(tensors), out, bw, "stack")


def take(a, indices: np.ndarray, axis: int, unique: bool = False) -> Tensor:
    """Gather along one axis; backward scatter-adds at the same indices.

    Pass unique=True when indices are known distinct (e.g. a permutation) to
    use plain assignment instead of the slower buffered scatter-add.
    """
    a = as_tensor(a)
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros(a.shape)
        sl = [slice(None)] * ga.ndim
        sl[axis] = idx
        if unique:
            ga[tuple(sl)] = g
        else:
            np.add.at(ga, tuple(sl), g)
        return (ga,)

    return _record((a,), out, bw, "take")


def slice_axis(a, start: int, stop: int, axis: int) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def bw(g):
        ga = np.zeros(a.shape)
        ga[sl] = g
        return (ga,)

    return _record((a,), out, bw, "slice")


def select(a, index: int, axis: int) -> Tensor:
    a = as_tensor(a)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        ga = np.zeros(a.shape)
        sl = [slice(None)] * ga.ndim
        sl[axis] = index
        ga[tuple(sl)] = g
        return (ga,)

    return _record((a,), out, bw, "select")


# -- convolution ---------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, padding: int, stride: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    # (b, c*kh*kw, oh*ow)
    col = windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * kh * kw, oh * ow)
    return np.ascontiguousarray(col), oh, ow


def _col2im(col: np.ndarray, x_shape, kh, kw, padding, stride, oh, ow) -> np.ndarray:
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xpad = np.zeros((b, c, hp, wp))
    col6 = col.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xpad[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += col6[:, :, i, j]
    if padding:
        return xpad[:, :, padding : padding + h, padding : padding + w]
    return xpad


def conv2d(x, k, padding: int = 0, stride: int = 1) -> Tensor:
    """2-d cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw) kernels.

    A rank-3 input (Cin,H,W) is treated as a single batch item and the
    batch axis is squeezed from the result.
    """
    x, k = as_tensor(x), as_tensor(k)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or k.data.ndim != 4:
        raise ValueError("conv2d expects (B,Cin,H,W) input and (Cout,Cin,kh,kw) kernel")
    cout, cin, kh, kw = k.shape
    if xd.shape[1] != cin:
        raise ValueError(f"conv2d channel mismatch: input {xd.shape[1]} vs kernel {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d requires padding >= 0 and stride >= 1")
    oh = (xd.shape[2] + 2 * padding - kh) // stride + 1
    ow = (xd.shape[3] + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError("conv2d output would be empty")

    col, oh, ow = _im2col(xd, kh, kw, padding, stride)
    kmat = k.data.reshape(cout, cin * kh * kw)
    out = (kmat @ col).reshape(xd.shape[0], cout, oh, ow)
    if squeeze:
        out = out[0]

    def bw(g):
        gd = g[None] if squeeze else g
        gmat = gd.reshape(gd.shape[0], cout, oh * ow)
        gk = np.einsum("bop,bkp->ok", gmat, col).reshape(k.shape)
        gcol = np.einsum("ok,bop->bkp", kmat, gmat)
        gx = _col2im(gcol, xd.shape, kh, kw, padding, stride, oh, ow)
        if squeeze:
            gx = gx[0]
        return gx, gk

    return _record((x, k), out, bw, "conv2d")


# -- custom gradients ------------------------------------------------------------

class CustomGradNode:
    """Forward/backward pair whose internals bypass the autodiff tape.

    Subclasses implement ``forward(*arrays) -> (out, ctx)`` and
    ``backward(grad_out, ctx, arrays) -> tuple`` returning one gradient
    array (or None) per input. Returned gradients must match input shapes.
    """

    name = "custom"

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad_out, ctx, arrays):
        raise NotImplementedError


def register_custom_grad(node: CustomGradNode, inputs: Sequence) -> Tensor:
    tensors = [as_tensor(t) for t in inputs]
    arrays = tuple(t.data for t in tensors)
    result = node.forward(*arrays)
    out_data, ctx = result if isinstance(result, tuple) else (result, None)

    def bw(g):
        grads = node.backward(g, ctx, arrays)
        if len(grads) != len(tensors):
            raise ValueError(f"{node.name}: backward returned {len(grads)} gradients for {len(tensors)} inputs")
        for gr, t in zip(grads, tensors):
            if gr is not None and gr.shape != t.shape:
                raise ValueError(f"{node.name}: gradient shape {gr.shape} does not match input shape {t.shape}")
        return grads

    return _record(tuple(tensors), out_data, bw, node.name)


# -- backward pass ------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the tape."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(t.shape)
            if t._leaf:
                if t.grad is None:
                    t.grad = np.zeros(t.shape)
                t.grad += gi
            else:
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
    # leaves that were recorded but received nothing are explicitly zero
    for node in tape.nodes:
        for t in node.inputs:
            if t._leaf and t.requires_grad and t.grad is None:
                t.grad = np.zeros(t.shape)
