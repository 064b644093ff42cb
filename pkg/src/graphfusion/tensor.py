"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records a closure on the active :class:`Tape`;
``backward`` replays the records in exact reverse order and accumulates
gradients additively across fan-out. Tensors are at most 2-d. Broadcasting in
binary ops is deliberately restricted (equal shapes, a scalar, or a row/column
vector against a matrix) so each gradient rule stays auditable.

A tape and the tensors on it belong to one worker. Independent tapes in
separate workers never share state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import ContractError, DomainError, NonFiniteError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Active tapes, innermost last. One worker process owns this stack.
_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float64 array of rank <= 2, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-d, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # Operator sugar; everything routes through the module-level ops.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class _TapeRecord:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: object  # callable: (grad_out: ndarray) -> tuple[ndarray | None, ...]
    name: str


@dataclass
class Tape:
    """Ordered record of executed operations.

    Inputs of every record precede it, so one reverse sweep computes all
    gradients deterministically.
    """

    _records: list[_TapeRecord] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *_exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn, name: str) -> None:
        self._records.append(_TapeRecord(inputs, output, backward_fn, name))
        self._produced.add(id(output))

    def leaves(self) -> list[Tensor]:
        """Tensors that enter the tape but were not produced by it."""
        seen: dict[int, Tensor] = {}
        for rec in self._records:
            for t in rec.inputs:
                if id(t) not in self._produced and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
        backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse sweep over ``tape`` starting from scalar ``loss``.

    Fills ``.grad`` (overwriting any previous value) on each requires_grad
    leaf that participated in the computation.
    """
    if len(tape) == 0:
        raise ContractError("backward on an empty tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape._records):
        gout = grads.pop(id(rec.output), None)
        if gout is None:
            continue
        gins = rec.backward(gout)
        for t, g in zip(rec.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                g = g.reshape(t.data.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    for t in tape.leaves():
        if t.requires_grad:
            t.grad = grads.get(id(t), np.zeros_like(t.data))


def _finish(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._record(inputs, out, backward_fn, name)
    return out


# ---------------------------------------------------------------------------
# Broadcasting support (restricted on purpose)
# ---------------------------------------------------------------------------

def _is_scalar_shape(shape: tuple[int, ...]) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1


def _broadcast_ok(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    if sa == sb or _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return True

    def row_vs_mat(v, m):
        return len(m) == 2 and (v == (m[1],) or v == (1, m[1]))

    def col_vs_mat(v, m):
        return len(m) == 2 and v == (m[0], 1)

    return (
        row_vs_mat(sa, sb)
        or row_vs_mat(sb, sa)
        or col_vs_mat(sa, sb)
        or col_vs_mat(sb, sa)
    )


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of the allowed broadcasts)."""
    if grad.shape == shape:
        return grad
    if _is_scalar_shape(shape):
        return np.asarray(grad.sum()).reshape(shape)
    if len(grad.shape) == 2:
        if shape in ((grad.shape[1],), (1, grad.shape[1])):
            return grad.sum(axis=0).reshape(shape)
        if shape == (grad.shape[0], 1):
            return grad.sum(axis=1).reshape(shape)
    raise ShapeError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


def _binary(name: str, a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} are not broadcast-compatible")
    out = fwd(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(da(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _finish(name, (a, b), out, bw)


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of two 2-d tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _finish("matmul", (a, b), out, bw)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish("neg", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _finish("relu", (a,), out, lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _finish("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = special.expit(a.data)
    return _finish("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def gauss_cdf(a) -> Tensor:
    """Standard normal CDF, computed through erfc for stable tails."""
    a = as_tensor(a)
    out = 0.5 * special.erfc(-a.data * _INV_SQRT2)
    pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
    return _finish("gauss_cdf", (a,), out, lambda g: (g * pdf,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    return _finish("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _finish("exp", (a,), out, lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires non-negative inputs")
    out = np.sqrt(a.data)
    return _finish("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated stably; always positive."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _finish("softplus", (a,), out, lambda g: (g * special.expit(a.data),))


def clamp_min(a, floor: float) -> Tensor:
    """max(x, floor); the gradient is blocked where the clamp is active."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    mask = a.data > floor
    return _finish("clamp_min", (a,), out, lambda g: (g * mask,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum())
    return _finish("sum_all", (a,), out, lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_rows(a) -> Tensor:
    """Column sums of a matrix, shape (1, n)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sum_rows expects a 2-d tensor, got {a.shape}")
    out = a.data.sum(axis=0, keepdims=True)
    return _finish("sum_rows", (a,), out, lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_rows(a) -> Tensor:
    """Column means of a matrix, shape (1, n)."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows expects a non-empty 2-d tensor, got {a.shape}")
    m = a.shape[0]
    out = a.data.mean(axis=0, keepdims=True)
    return _finish("mean_rows", (a,), out, lambda g: (np.broadcast_to(g / m, a.shape).copy(),))


def take_rows(a, index) -> Tensor:
    """Gather rows (or 1-d elements) by integer index."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows index must be 1-d, got {idx.shape}")
    if a.data.ndim == 0:
        raise ShapeError("take_rows needs a 1-d or 2-d tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for shape {a.shape}")
    out = a.data[idx]

    def bw(g):
        gz = np.zeros_like(a.data)
        np.add.at(gz, idx, g)
        return (gz,)

    return _finish("take_rows", (a,), out, bw)


def scatter_add_rows(a, index, n_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``n_rows`` buckets chosen by ``index``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"scatter_add_rows: tensor {a.shape} vs index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError(f"scatter_add_rows index out of range for {n_rows} rows")
    out = np.zeros((n_rows, a.shape[1]), dtype=np.float64)
    np.add.at(out, idx, a.data)
    return _finish("scatter_add_rows", (a,), out, lambda g: (g[idx],))


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along rows (axis 0) or columns (axis 1)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    if axis not in (0, 1):
        raise ShapeError("concat axis must be 0 or 1")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        if axis == 0:
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(ts)))
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return _finish("concat", tuple(ts), out, bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _finish("reshape", (a,), out, lambda g: (g.reshape(a.data.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.shape}")
    return _finish("transpose", (a,), a.data.T.copy(), lambda g: (g.T.copy(),))


def cumsum(a) -> Tensor:
    """Cumulative sum of a 1-d tensor."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ShapeError(f"cumsum expects a 1-d tensor, got {a.shape}")
    out = np.cumsum(a.data)
    return _finish("cumsum", (a,), out, lambda g: (np.cumsum(g[::-1])[::-1],))


def dropout(a, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout with an explicit random source; identity at eval."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return _finish("dropout", (a,), a.data.copy(), lambda g: (g,))
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return _finish("dropout", (a,), a.data * keep, lambda g: (g * keep,))


_ELEMENTWISE_UNARY = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "gauss_cdf": gauss_cdf,
    "log": log,
    "neg": neg,
    "exp": exp,
    "sqrt": sqrt,
    "softplus": softplus,
}
_ELEMENTWISE_BINARY = {"add": add, "mul": mul, "sub": sub, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (binary ops need ``b``)."""
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ContractError(f"elementwise '{op}' needs two operands")
        return _ELEMENTWISE_BINARY[op](a, b)
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ContractError(f"elementwise '{op}' takes one operand")
        return _ELEMENTWISE_UNARY[op](a)
    raise ContractError(f"unknown elementwise op '{op}'")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction, in place on params and state."""
    if lr <= 0.0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params/grads/state lengths differ")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match param {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1**t)
        v_hat = state.v[i] / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
