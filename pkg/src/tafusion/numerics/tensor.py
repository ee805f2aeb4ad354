"""Reverse-mode differentiation over numpy arrays.

Operations only record themselves when a :class:`Trace` is active and at least
one input requires a gradient, so the same forward code serves training
(traced) and inference (untraced).  All arithmetic is float64.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_ACTIVE: list["Trace"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # operator sugar; the real work lives in the module-level functions
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Step(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Trace:
    """Ordered tape of primitive applications.

    Steps are appended in execution order, so every input of step k is either
    a leaf or the output of an earlier step.
    """

    def __init__(self):
        self.steps: list[Step] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.steps)

    def backward(self, loss: Tensor):
        backward(self, loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(a: np.ndarray) -> bool:
    # one summing pass screens the common case; only an inf/nan sum needs the full check
    return bool(np.isfinite(a.sum())) or bool(np.isfinite(a).all())


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not _all_finite(data):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].steps.append(Step(op, inputs, out, vjp))
    return out


def backward(trace: Trace, loss: Tensor):
    """Populate ``.grad`` of every leaf that the traced loss depends on.

    Leaf gradients accumulate into any existing ``.grad``; tensors the loss
    does not touch are left alone.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(s.output) for s in trace.steps}
    if id(loss) not in produced:
        raise ContractError("loss was not produced by this trace")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for step in reversed(trace.steps):
        g = grads.pop(id(step.output), None)
        if g is None:
            continue
        for t, gi in zip(step.inputs, step.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
    seen: set[int] = set()
    for step in trace.steps:
        for t in step.inputs:
            k = id(t)
            if k in grads and k not in seen:
                seen.add(k)
                if t.grad is None:
                    t.grad = grads[k].copy()
                else:
                    t.grad = t.grad + grads[k]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    return _emit("mul", da * db, (a, b),
                 lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    out = da / db

    def vjp(g):
        return (_unbroadcast(g / db, da.shape), _unbroadcast(-g * out / db, db.shape))

    return _emit("div", out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split form avoids exp overflow on either tail
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _emit("log", np.log(d), (x,), lambda g: (g / d,))


def square(x: Tensor) -> Tensor:
    d = x.data
    return _emit("square", d * d, (x,), lambda g: (2.0 * g * d,))


def absolute(x: Tensor) -> Tensor:
    d = x.data
    return _emit("abs", np.abs(d), (x,), lambda g: (g * np.sign(d),))


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ContractError("mean over an empty axis")
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    da, db = a.data, b.data
    flat = db.ndim == 2 and da.ndim > 2

    def prod(x, y):
        # (..., k) @ (k, m) as one 2-d product instead of a stack of small ones
        if flat:
            return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))
        return x @ y

    def vjp(g):
        ga = prod(g, np.swapaxes(db, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if flat:
                # shared weight: fold the batch axes into one product
                gb = da.reshape(-1, da.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(da, -1, -2) @ g
        return (None if ga is None else _unbroadcast(ga, da.shape),
                None if gb is None else _unbroadcast(gb, db.shape))

    return _emit("matmul", prod(da, db), (a, b), vjp)


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, tuple(axes))


def _is_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    advanced = _is_advanced(idx)

    def vjp(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _emit("getitem", np.array(x.data[idx]), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    nd = xs[0].ndim
    ax = axis % nd
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * nd
        outs = []
        for i in range(len(xs)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            outs.append(g[tuple(sl)])
        return outs

    return _emit("concat", np.concatenate([x.data for x in xs], axis=ax), xs, vjp)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    nd = xs[0].ndim + 1
    ax = axis % nd

    def vjp(g):
        return [np.take(g, i, axis=ax) for i in range(len(xs))]

    return _emit("stack", np.stack([x.data for x in xs], axis=ax), xs, vjp)


def pad_last(x: Tensor, left: int, right: int) -> Tensor:
    n = x.shape[-1]
    width = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    return _emit("pad", np.pad(x.data, width), (x,), lambda g: (g[..., left:left + n],))


# ------------------------------------------------------------------ softmax


def _rowsum(a: np.ndarray, axis: int) -> np.ndarray:
    if axis in (-1, a.ndim - 1):
        # a matrix-vector product is much faster than a short-axis reduction
        return (a @ np.ones(a.shape[-1]))[..., None]
    return a.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, shift: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``.

    ``shift`` may carry a per-row upper bound on the inputs to subtract in
    place of the row maximum; the result is the same up to rounding.  If the
    bound is so loose that a row underflows, the exact maximum is used.
    """
    if not _all_finite(x.data):
        raise NumericError("softmax input contains non-finite values")
    y = None
    if shift is not None:
        e = np.exp(x.data - shift)
        tot = _rowsum(e, axis)
        if tot.min() > 1e-200:
            y = e / tot
    if y is None:
        e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
        y = e / _rowsum(e, axis)

    def vjp(g):
        return (y * (g - _rowsum(g * y, axis)),)

    return _emit("softmax", y, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not _all_finite(x.data):
        raise NumericError("log_softmax input contains non-finite values")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", y, (x,), vjp)
