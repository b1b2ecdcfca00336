"""Reverse-mode automatic differentiation over dense real tensors.

A small define-by-run engine: every operation computes its result eagerly
on numpy arrays and, while a :class:`Tape` is active, records a node whose
vector-Jacobian closure is replayed in exact reverse creation order by
:meth:`Tape.gradients`.  Creation order is a topological order by
construction, since an operation's inputs must exist before it runs.

Conventions that downstream code relies on:

* float64 is the default dtype; :func:`set_default_dtype` switches the
  whole engine (e.g. to float32 for faster training runs).
* ``minimum``/``maximum`` route the gradient entirely to the active
  branch; on ties the FIRST argument receives it.
* ``clip`` passes the gradient wherever ``lo <= x <= hi``, bounds
  inclusive.
* Non-finite values are rejected at tensor creation and after every
  operation (:class:`NumericError` names the offending op).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "NondeterminismError",
    "set_default_dtype",
    "default_dtype",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "sum_all",
    "minimum",
    "maximum",
    "clip",
    "concat",
    "reshape",
    "take",
    "subrange",
    "take_rows",
    "dropout",
    "cross_entropy_logits",
    "grad_check",
    "GradCheckEntry",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A tensor acquired NaN or Inf values."""


class NondeterminismError(RuntimeError):
    """A function under grad_check returned different values on identical calls."""


_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Select the dtype used by all subsequently created tensors.

    Only float64 (the default, required by gradient checks) and float32
    are supported.
    """
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


class Tensor:
    """A dense real tensor, optionally tracked on the active tape.

    ``data`` is a row-major numpy array.  Leaf tensors created with
    ``requires_grad=True`` (see :func:`parameter`) are the targets of
    :meth:`Tape.gradients`.
    """

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if not np.isfinite(arr).all():
            raise NumericError(f"tensor {name or '<constant>'}: non-finite values at creation")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        tag = self.name or self.op or "const"
        return f"Tensor({tag}, shape={self.shape})"

    # arithmetic sugar; scalars and arrays are promoted to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        if isinstance(index, slice):
            if index.step not in (None, 1):
                raise ShapeError("subrange: only contiguous slices are supported")
            start, stop, _ = index.indices(self.shape[0])
            return subrange(self, start, stop)
        return take(self, int(index))


def parameter(data, name: str) -> Tensor:
    """Create a named trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations for one forward computation.

    Used as a context manager; operations executed inside the block are
    appended in creation order.  The backward pass visits nodes in exact
    reverse creation order.  A tape is intended for a single
    forward/backward cycle and is rebuilt per sequence.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._outer: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._outer = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def nodes(self) -> tuple[Tensor, ...]:
        return tuple(self._nodes)

    def gradients(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Backpropagate from a scalar loss to every named leaf.

        Leaves not reached by the backward sweep get a zero gradient.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
        if loss._vjp is None and not loss.requires_grad:
            raise ValueError("backward: loss is not connected to this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                if parent._vjp is None and not parent.requires_grad:
                    continue  # constant leaf, gradient is never read
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return {
            name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
        }


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite values in result")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out.op = op
    tape = Tape._active
    if tape is not None:
        out._parents = parents
        out._vjp = vjp
        tape._nodes.append(out)
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape}") from None
    return _result(
        "add", data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape}") from None
    return _result(
        "sub", data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape}") from None
    return _result(
        "mul", data, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", data, (a, b), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    flat = np.ravel(x)
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = _stable_sigmoid(a.data)
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _result("log", y, (a,), lambda g: (g / a.data,))


def softmax(a) -> Tensor:
    """Softmax over a 1-D tensor; invariant to a constant shift of the logits."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"softmax: expected a 1-D tensor, got shape {a.shape}")
    z = a.data - a.data.max()
    e = np.exp(z)
    y = e / e.sum()
    return _result("softmax", y, (a,), lambda g: (y * (g - np.dot(g, y)),))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())
    shape = a.data.shape
    return _result("sum", data, (a,), lambda g: (np.broadcast_to(g, shape),))


def minimum(a, b) -> Tensor:
    """Elementwise min; the smaller argument gets the whole gradient, ties go to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        mask = a.data <= b.data
    except ValueError:
        raise ShapeError(f"minimum: shapes {a.shape} and {b.shape}") from None
    data = np.where(mask, a.data, b.data)
    return _result(
        "minimum", data, (a, b),
        lambda g: (
            _unbroadcast(g * mask, a.data.shape),
            _unbroadcast(g * ~mask, b.data.shape),
        ),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; gradient to the larger argument, ties go to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        mask = a.data >= b.data
    except ValueError:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape}") from None
    data = np.where(mask, a.data, b.data)
    return _result(
        "maximum", data, (a, b),
        lambda g: (
            _unbroadcast(g * mask, a.data.shape),
            _unbroadcast(g * ~mask, b.data.shape),
        ),
    )


def clip(a, lo: float | None, hi: float | None) -> Tensor:
    """Clamp to [lo, hi]; gradient passes wherever the input is within bounds (inclusive)."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _result("clip", data, (a,), lambda g: (g * mask,))


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ShapeError("concat: no operands")
    if any(p.ndim != 1 for p in parts):
        raise ShapeError(f"concat: expected 1-D operands, got {[p.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts])
    offsets = np.cumsum([p.data.shape[0] for p in parts])[:-1]
    return _result("concat", data, parts, lambda g: tuple(np.split(g, offsets)))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: {a.shape} to {shape}") from None
    return _result("reshape", data, (a,), lambda g: (g.reshape(a.data.shape),))


def take(a, index: int) -> Tensor:
    """Select row ``index`` of a matrix, or element ``index`` of a vector."""
    a = _as_tensor(a)
    if a.ndim not in (1, 2):
        raise ShapeError(f"take: expected 1-D or 2-D, got shape {a.shape}")
    if not 0 <= index < a.shape[0]:
        raise ShapeError(f"take: index {index} out of range for shape {a.shape}")
    data = np.asarray(a.data[index]).copy()

    def vjp(g):
        z = np.zeros_like(a.data)
        z[index] = g
        return (z,)

    return _result("take", data, (a,), vjp)


def subrange(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 1:
        raise ShapeError(f"subrange: expected a 1-D tensor, got shape {a.shape}")
    if not 0 <= start <= stop <= a.shape[0]:
        raise ShapeError(f"subrange: [{start}:{stop}] out of range for shape {a.shape}")
    data = a.data[start:stop].copy()

    def vjp(g):
        z = np.zeros_like(a.data)
        z[start:stop] = g
        return (z,)

    return _result("subrange", data, (a,), vjp)


def take_rows(matrix, indices) -> Tensor:
    """Gather rows of a matrix (embedding lookup); gradients scatter-add back."""
    matrix = _as_tensor(matrix)
    if matrix.ndim != 2:
        raise ShapeError(f"take_rows: expected a 2-D tensor, got shape {matrix.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= matrix.shape[0]):
        raise ShapeError(f"take_rows: indices out of range for shape {matrix.shape}")
    data = matrix.data[idx]

    def vjp(g):
        z = np.zeros_like(matrix.data)
        np.add.at(z, idx, g)
        return (z,)

    return _result("take_rows", data, (matrix,), vjp)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rate) so eval needs no rescaling."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep).astype(a.data.dtype) / keep
    return mul(a, Tensor(mask))


def cross_entropy_logits(logits, target: int) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits), computed stably."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy: expected 1-D logits, got shape {logits.shape}")
    if not 0 <= target < logits.shape[0]:
        raise ShapeError(f"cross_entropy: target {target} out of range for shape {logits.shape}")
    z = logits.data - logits.data.max()
    se = np.exp(z).sum()
    data = np.asarray(np.log(se) - z[target])

    def vjp(g):
        p = np.exp(z) / se
        p[target] -= 1.0
        return (g * p,)

    return _result("cross_entropy", data, (logits,), vjp)


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport:
    """Per-parameter comparison of backprop against central finite differences."""

    entries: tuple[GradCheckEntry, ...]
    step: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.passed]


def _rel_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must rebuild its computation from the live ``params`` tensors on
    every call and be deterministic (freeze any sampling behind a fixed
    seed); non-determinism across two identical evaluations raises
    :class:`NondeterminismError`.
    """
    base1 = float(f().data)
    base2 = float(f().data)
    if base1 != base2:
        raise NondeterminismError(
            f"f() returned {base1!r} then {base2!r} on identical evaluations"
        )

    with Tape() as tape:
        loss = f()
    analytic = tape.gradients(loss, params)

    entries = []
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        an = analytic[name].reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(f().data)
            flat[j] = orig - step
            fm = float(f().data)
            flat[j] = orig
            fd = (fp - fm) / (2.0 * step)
            worst = max(worst, _rel_error(float(an[j]), fd))
        entries.append(GradCheckEntry(name=name, max_rel_error=worst, passed=worst < tol))
    return GradCheckReport(entries=tuple(entries), step=step, tol=tol)
