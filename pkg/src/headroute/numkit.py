"""Small reverse-mode autodiff layer over numpy.

Tensors wrap an ``ndarray``. When a :class:`Tape` is active on the current
thread, every op whose inputs include a tracked tensor (a :class:`Parameter`
or the output of an earlier recorded op) appends a node holding its
vector-Jacobian product. ``Tape.backward`` replays those nodes in reverse and
accumulates into ``Parameter.grad``.

Outside a tape, ops are plain numpy calls, so inference can run from any
number of threads at once.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

MASK_NEG = -1e9
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward called on something that was not recorded."""


class Tensor:
    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

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


class Parameter(Tensor):
    """A trainable tensor with a name and a gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


_local = threading.local()


def current_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tape:
    """Records differentiable ops executed on this thread while active."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self._tracked: set[int] = set()
        self._prev = None

    def __enter__(self):
        self._prev = current_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def is_tracked(self, t) -> bool:
        return isinstance(t, Parameter) or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple, vjp: Callable):
        self.nodes.append((out, inputs, vjp))
        self._tracked.add(id(out))

    def backward(self, loss: Tensor):
        backward(self, loss)


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``."""
    if tape is None or not isinstance(loss, Tensor) or id(loss) not in tape._tracked:
        raise TapeError("loss was not produced under an active tape")
    if loss.size != 1:
        raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = vjp(g)
        for inp, gi in zip(inputs, in_grads):
            if gi is None or not tape.is_tracked(inp):
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _maybe_record(out: Tensor, inputs: tuple, vjp: Callable) -> Tensor:
    tape = current_tape()
    if tape is not None and any(tape.is_tracked(i) for i in inputs):
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = Tensor(a.data + b.data)
    return _maybe_record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = Tensor(a.data - b.data)
    return _maybe_record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = Tensor(a.data * b.data)
    return _maybe_record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = Tensor(a.data / b.data)
    return _maybe_record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _maybe_record(out, (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return _maybe_record(out, (x,), lambda g: (g * out.data,))


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    return _maybe_record(out, (x,), lambda g: (g * (1.0 - out.data * out.data),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor((x.data * cdf).astype(x.dtype, copy=False))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _maybe_record(out, (x,), vjp)


# ------------------------------------------------------------------- shaping


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError as e:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from e

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _maybe_record(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _maybe_record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))
    return _maybe_record(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, key) -> Tensor:
    out = Tensor(np.array(x.data[key]))

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _maybe_record(out, (x,), vjp)


def take(table: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup, batch-row selection)."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"index out of range for axis of size {n}")
    out = Tensor(np.take(table.data, idx, axis=axis))

    def vjp(g):
        gt = np.zeros_like(table.data)
        if axis == 0:
            np.add.at(gt, idx, g)
        else:
            np.add.at(np.moveaxis(gt, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gt,)

    return _maybe_record(out, (table,), vjp)


def assemble_rows(pieces: Sequence[tuple[np.ndarray, Tensor]], n_rows: int) -> Tensor:
    """Build an ``n_rows``-row tensor from (row indices, block) pieces."""
    first = pieces[0][1]
    data = np.zeros((n_rows,) + first.shape[1:], dtype=first.dtype)
    for rows, block in pieces:
        data[rows] = block.data
    out = Tensor(data)
    blocks = tuple(b for _, b in pieces)
    rows_list = [np.asarray(r) for r, _ in pieces]
    return _maybe_record(out, blocks, lambda g: tuple(g[r] for r in rows_list))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _maybe_record(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ----------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _maybe_record(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _maybe_record(out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        gxhat = g * gamma.data
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _maybe_record(out, (x, gamma, beta), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    out = Tensor(np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype))

    def vjp(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return _maybe_record(out, (logits,), vjp)


# -------------------------------------------------------------- grad checking


def grad_check(
    f: Callable[[], Tensor | float],
    params: Iterable[Parameter],
    h: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is re-evaluated with each parameter element nudged by +-h in place;
    the denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if isinstance(loss, Tensor) and id(loss) in tape._tracked:
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        out = f()
        return out.item() if isinstance(out, Tensor) else float(out)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / denom)
    return worst
