"""Reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on the active :class:`Tape` (if any) and replayed in
reverse by :func:`backpropagate`.  With no tape active, ops run as plain numpy
and nothing is recorded, which is the inference path.
"""

from __future__ import annotations

import builtins
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NumericError(ArithmeticError):
    """A non-finite value entered or left an op."""


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_derived")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._derived = False

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive ops.

    Use as a context manager; ops executed inside are recorded when at least
    one input requires a gradient.  A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backpropagate(loss)


_local = threading.local()


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return _wrap(np.asarray(x, dtype=dtype))


_reduce_sum = np.add.reduce


def _check_finite(op: str, arrays: Iterable[np.ndarray]) -> None:
    for arr in arrays:
        # one reduction on the happy path; nan/inf propagate through the sum
        if not np.isfinite(_reduce_sum(arr, axis=None)) and not np.isfinite(arr).all():
            raise NumericError(f"{op}: non-finite value encountered")


def _wrap(out: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = False
    t.grad = None
    t.name = None
    t._tape = None
    t._derived = False
    return t


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Callable,
          check: bool = True) -> Tensor:
    if check:
        _check_finite(op, (out,))
    result = _wrap(out)
    result._derived = True
    stack = getattr(_local, "stack", None)
    tape = stack[-1] if stack else None
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._tape = tape
        tape.nodes.append(_Node(op, tuple(inputs), result, backward))
    return result


def _leaf_check(op: str, inputs: Sequence[Tensor]) -> None:
    # op outputs are checked in _emit; trainable leaves are checked by the optimizer
    for t in inputs:
        if not t._derived and not t.requires_grad:
            _check_finite(op, (t.data,))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcastable(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class _IndexGrad:
    """Gradient that is zero outside ``index``; avoids dense scatter per slice."""

    __slots__ = ("index", "value", "shape")

    def __init__(self, index, value, shape):
        self.index = index
        self.value = value
        self.shape = shape

    def dense(self, dtype) -> np.ndarray:
        out = np.zeros(self.shape, dtype=dtype)
        out[self.index] += self.value
        return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcastable("add", a, b)
    _leaf_check("add", (a, b))

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcastable("sub", a, b)
    _leaf_check("sub", (a, b))

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcastable("mul", a, b)
    _leaf_check("mul", (a, b))

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, backward)


def neg(a: Tensor) -> Tensor:
    _leaf_check("neg", (a,))
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant that never needs a gradient."""
    _leaf_check("scale", (a,))
    factor = a.dtype.type(factor)
    return _emit("scale", (a,), a.data * factor, lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    _leaf_check("sigmoid", (a,))
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    _leaf_check("tanh", (a,))
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    _leaf_check("relu", (a,))
    on = a.data > 0
    return _emit("relu", (a,), np.where(on, a.data, 0).astype(a.dtype), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    _leaf_check("exp", (a,))
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor, clamp: float = 0.0) -> Tensor:
    """Natural log of ``max(a, clamp)``; entries below the clamp get zero gradient."""
    _leaf_check("log", (a,))
    x = a.data
    if clamp > 0:
        live = x >= clamp
        safe = np.where(live, x, clamp).astype(a.dtype)
    else:
        live = None
        safe = x
    with np.errstate(divide="ignore"):
        out = np.log(safe)

    def backward(g):
        grad = g / safe
        return (grad * live if live is not None else grad,)

    return _emit("log", (a,), out, backward)


def square(a: Tensor) -> Tensor:
    _leaf_check("square", (a,))
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def blend(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """``mask*a + (1-mask)*b`` for a constant 0/1 mask."""
    _broadcastable("blend", a, b)
    _leaf_check("blend", (a, b))
    m = np.asarray(mask, dtype=a.dtype)
    out = m * a.data + (1 - m) * b.data

    def backward(g):
        return unbroadcast(g * m, a.shape), unbroadcast(g * (1 - m), b.shape)

    return _emit("blend", (a, b), out, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batching rules.

    Supports (..., m, k) @ (k, n) and (..., m, k) @ (..., k, n).
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _leaf_check("matmul", (a, b))
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, backward)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _leaf_check("sum", (a,))
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), np.asarray(out, dtype=a.dtype), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    _leaf_check("max", (a,))
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx_k, g, axis=axis)
        return (grad,)

    return _emit("max", (a,), out, backward)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (same shape, 1 = keep) removes entries from the normalization;
    masked entries come out as exactly 0.  Every row needs one live entry.
    """
    _leaf_check("softmax", (a,))
    x = a.data
    if mask is not None:
        live = np.asarray(mask, dtype=bool)
        if live.shape != x.shape:
            raise ShapeError(f"softmax: mask shape {live.shape} differs from input {x.shape}")
        if not live.any(axis=-1).all():
            raise ShapeError("softmax: a row has no unmasked entries")
        x = np.where(live, x, -np.inf)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = (e / e.sum(axis=-1, keepdims=True)).astype(a.dtype)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax", (a,), out, backward)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    _leaf_check("reshape", (a,))
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),), check=False)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    _leaf_check("getitem", (a,))
    out = a.data[index]

    def backward(g):
        return (_IndexGrad(index, g, a.shape),)

    return _emit("getitem", (a,), out, backward, check=False)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    _leaf_check("concat", tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, out, backward, check=False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    _leaf_check("stack", tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit("stack", tensors, out, backward, check=False)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    _leaf_check("embedding", (table,))

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _emit("embedding", (table,), table.data[ids], backward, check=False)


def permute_rows(a: Tensor, perm: np.ndarray) -> Tensor:
    """Reorder axis 1 independently per batch row: ``out[b, t] = a[b, perm[b, t]]``.

    ``perm[b]`` must be a permutation of ``range(a.shape[1])``.
    """
    perm = np.asarray(perm)
    if perm.shape != a.shape[:2]:
        raise ShapeError(f"permute_rows: permutation shape {perm.shape} vs input {a.shape}")
    _leaf_check("permute_rows", (a,))
    index = perm.reshape(perm.shape + (1,) * (a.ndim - 2))
    inverse = np.argsort(perm, axis=1).reshape(index.shape)
    out = np.take_along_axis(a.data, index, axis=1)
    return _emit("permute_rows", (a,), out, lambda g: (np.take_along_axis(g, inverse, axis=1),), check=False)


# ---------------------------------------------------------------- dropout


def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def apply_dropout(
    x: Tensor,
    rate: float,
    mode: str = "train",
    seed: int | np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Inverted dropout; identity in ``eval`` mode.

    A precomputed ``mask`` freezes the draw (used by gradient checks).
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or (rate == 0 and mask is None):
        return x
    if mask is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        mask = dropout_mask(x.shape, rate, rng, x.dtype)
    return mul(x, Tensor(np.asarray(mask, dtype=x.dtype)))


# ---------------------------------------------------------------- registry

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "scale": scale,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
    "blend": blend,
    "matmul": matmul,
    "sum": sum,
    "mean": mean,
    "max": max,
    "softmax": softmax,
    "reshape": reshape,
    "getitem": getitem,
    "concat": concat,
    "stack": stack,
    "embedding": embedding,
    "permute_rows": permute_rows,
    "dropout": apply_dropout,
}


def forward_primitive(op_kind: str, *inputs, **attrs) -> Tensor:
    """Run a registered op by name."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def backpropagate(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf needing it.

    Intermediate gradients are kept only while the sweep runs.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backpropagate: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        return
    if not tape.nodes:
        raise ValueError("backpropagate: tape is empty")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owned: set[int] = set()  # buffers safe to update in place
    for node in reversed(tape.nodes):
        key = id(node.output)
        g = grads.pop(key, None)
        owned.discard(key)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                if isinstance(gi, _IndexGrad):
                    gi = gi.dense(inp.dtype)
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi
                continue
            key = id(inp)
            if isinstance(gi, _IndexGrad):
                buf = grads.get(key)
                if buf is None:
                    buf = np.zeros(gi.shape, dtype=inp.dtype)
                elif key not in owned:
                    buf = buf.copy()
                buf[gi.index] += gi.value
                grads[key] = buf
                owned.add(key)
            elif key in grads:
                grads[key] = grads[key] + gi
                owned.add(key)
            else:
                grads[key] = gi


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from ``params`` on each call and must be
    deterministic.  ``max_entries`` subsamples entries per parameter.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape():
        loss = f()
        base = float(loss.data)
        backpropagate(loss)
    if float(f().data) != base:
        raise ValueError("finite_difference_check: f is not deterministic")

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            denom = builtins.max(abs(a), abs(numeric), eps)
            worst = builtins.max(worst, abs(a - numeric) / denom)
    return float(worst)
