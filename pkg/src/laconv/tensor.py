"""Dense tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy buffers. While a :class:`Tape` is active,
every op whose inputs require gradients appends a record to it; calling
:meth:`Tape.backward` replays those records in reverse. Leaf tensors
(parameters) accumulate into ``.grad``; intermediate gradients live only
for the duration of the backward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from . import kernels

_TAPES: list["Tape"] = []
_CHECK_FINITE = [True]
_MAC_COUNTERS: list["MacCounter"] = []


class MacCounter:
    """Counts multiply-accumulates issued by matmul, linear and dyconv ops."""

    def __init__(self):
        self.macs = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.macs += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)

    def __enter__(self) -> "MacCounter":
        _MAC_COUNTERS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _MAC_COUNTERS.remove(self)


def _count(op: str, n: int) -> None:
    for c in _MAC_COUNTERS:
        c.add(op, n)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle the per-op NaN/Inf check (it costs one pass over every output)."""
    prev = _CHECK_FINITE[0]
    _CHECK_FINITE[0] = enabled
    try:
        yield
    finally:
        _CHECK_FINITE[0] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        tape = _TAPES[-1] if _TAPES else None
        if tape is None:
            raise RuntimeError("backward() needs an active Tape")
        tape.backward(self, grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops.

    Records are appended in execution order, so every op's inputs precede it.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, out: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if out.data.size != 1:
                raise ShapeError("backward() without a seed gradient requires a scalar output")
            grad = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(grad, dtype=out.dtype)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever remains belongs to leaves
        for t in self._leaves():
            g = grads.pop(id(t), None)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g
        if id(out) in grads and out.requires_grad:
            g = grads[id(out)]
            out.grad = g.copy() if out.grad is None else out.grad + g

    def _leaves(self):
        produced = {id(r.output) for r in self.records}
        seen = set()
        for r in self.records:
            for t in r.inputs:
                if isinstance(t, Tensor) and t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    yield t

    def clear(self) -> None:
        self.records.clear()


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if _CHECK_FINITE[0] and not np.isfinite(data).all():
        raise NonFiniteError("non-finite values produced by an op")
    needs = bool(_TAPES) and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPES[-1].records.append(Record(tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(ax, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    return _emit(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data / b.data
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,))


_relu = relu  # batch_norm's ``relu`` flag shadows the name


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


# linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    out = a.data @ b.data
    _count("matmul", out.size * a.shape[-1])
    return _emit(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., i] @ w[i, o] (+ b), flattening leading axes into one GEMM."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    _count("linear", out.size * w.shape[0])
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out.reshape(*lead, w.shape[1]), inputs, back)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _emit(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis for i in parts)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit(np.array(out), (x,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _emit(out, (table,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _emit(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def where(cond: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Elementwise ``x`` where cond else the constant ``fill``."""
    cond = np.broadcast_to(cond, x.shape)
    out = np.where(cond, x.data, np.asarray(fill, dtype=x.dtype))
    return _emit(out, (x,), lambda g: (g * cond,))


def repeat_blocks(x: Tensor, s: int) -> Tensor:
    """(B, h', w', d) -> (B, h'*s, w'*s, d), each cell replicated s x s."""
    if s == 1:
        return x
    out = np.repeat(np.repeat(x.data, s, axis=1), s, axis=2)
    B, hp, wp, d = x.shape

    def back(g):
        return (g.reshape(B, hp, s, wp, s, d).sum(axis=(2, 4)),)

    return _emit(out, (x,), back)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 stride-2 max pool over axes 1, 2 of (B, H, W, C); ties go to the first max."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got {H}x{W}")
    out = kernels.maxpool_forward(x.data)
    return _emit(out, (x,), lambda g: (kernels.maxpool_backward(g, x.data, out),))


# normalization / attention primitives

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable, True = keep) sends logits to -inf."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(-1, keepdims=True)),)

    return _emit(out, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(-1, keepdims=True)
    lse = np.log(np.exp(z).sum(-1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit(out, (x,), lambda g: (g - p * g.sum(-1, keepdims=True),))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    targets = np.asarray(targets)
    lp = log_softmax(logits)
    picked = getitem(lp, (np.arange(len(targets)), targets))
    return mul(sum_(picked), -1.0 / len(targets))


class BatchNormState:
    """Running statistics for one batch-norm site."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool,
               residual: Tensor | None = None, relu: bool = False) -> Tensor:
    """Normalize per channel (last axis) over every leading axis.

    ``residual`` is added after the affine map and ``relu`` applied last; in
    training mode both are fused into the normalization kernel.
    """
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    if residual is not None and residual.shape != x.shape:
        raise ShapeError(f"residual shape {residual.shape} != {x.shape}")
    if not train:
        inv = 1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)
        xhat = ((x2 - state.running_mean) * inv).astype(x.dtype)
        out = gamma.data * xhat + beta.data

        def back_eval(g):
            g2 = g.reshape(-1, C)
            gx = (g2 * (gamma.data * inv)).astype(x.dtype).reshape(x.shape)
            return gx, (g2 * xhat).sum(0), g2.sum(0)

        y = _emit(out.reshape(x.shape), (x, gamma, beta), back_eval)
        if residual is not None:
            y = add(y, residual)
        return _relu(y) if relu else y

    if n < 1:
        raise ShapeError("batch_norm needs at least one row in train mode")
    res2 = None if residual is None else residual.data.reshape(-1, C)
    y, mu, var, inv = kernels.bn_forward(x2, gamma.data, beta.data, state.eps, res2, relu)
    m = state.momentum
    unbiased = var * n / (n - 1) if n > 1 else var
    state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(state.running_mean.dtype)
    state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)

    def back(g):
        g2 = g.reshape(-1, C)
        dx, dgamma, dbeta, gp = kernels.bn_backward(g2, x2, y if relu else None, gamma.data, mu, inv)
        grads = (dx.reshape(x.shape), dgamma, dbeta)
        if residual is not None:
            grads += ((g2 if gp is None else gp).reshape(x.shape),)
        return grads

    inputs = (x, gamma, beta) if residual is None else (x, gamma, beta, residual)
    return _emit(y.reshape(x.shape), inputs, back)


def dynamic_depthwise_conv(x: Tensor, w: Tensor, k: int, g: int, s: int = 1) -> Tensor:
    """Spatially-varying grouped depth-wise conv, zero padded, stride 1.

    x: (B, H, W, D); w: (B, H/s, W/s, k*k*g) laid out as (di, dj, group).
    Channels split into g contiguous groups of D // g; every channel in a group
    uses that group's filter at that position. With s > 1 each kernel is shared
    by an s x s cell of positions.
    """
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    B, H, W, D = x.shape
    if D % g:
        raise ValueError(f"channels {D} not divisible by groups {g}")
    if H % s or W % s or w.shape != (B, H // s, W // s, k * k * g):
        raise ShapeError(f"kernel shape {w.shape} does not match {(B, H // s, W // s, k * k * g)}")
    out = kernels.dyconv_forward(x.data, w.data, k, g, s)
    _count("dyconv", B * H * W * D * k * k)

    def back(gout):
        return kernels.dyconv_backward(x.data, w.data, gout, k, g, s)

    return _emit(out, (x, w), back)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)
