"""Dense 2-D float64 tensors with a tape for reverse-mode gradients.

Every value is a ``rows x cols`` array. Batches are stacked along the rows.
Operations whose inputs live on a :class:`Tape` record a node holding a
closure that maps the output gradient to input gradients; :func:`backward`
replays the nodes in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition on arguments (other than shape) was violated."""


class Tensor:
    __slots__ = ("data", "tape", "name", "__weakref__")

    def __init__(self, data, tape: Tape | None = None, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations. Leaves are registered explicitly."""

    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), tape=self, name=name)
        self.leaves.append(t)
        return t

    def bind(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        """Register every array in ``params`` as a named leaf."""
        return {k: self.leaf(v, name=k) for k, v in params.items()}

    def __len__(self) -> int:
        return len(self.nodes)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def record(
    value: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``value`` as the output of an op over ``inputs``.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input. Nothing is recorded when no input is on a tape, so the
    same code path serves plain inference.
    """
    tape = _tape_of(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.nodes.append(Node(tuple(inputs), out, backward_fn))
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.tape is not None, b.tape is not None

    def back(g):
        return (g @ B.T if need_a else None), (A.T @ g if need_b else None)

    return record(A @ B, (a, b), back)


def grouped_matmul(a: Tensor, b: Tensor, groups: int, transpose_b: bool = False) -> Tensor:
    """Independent products of consecutive row blocks, stacked back into rows.

    ``a`` holds ``groups`` blocks of ``p`` rows and ``b`` holds ``groups``
    blocks; block ``g`` of the result is ``a_g @ b_g`` (or ``a_g @ b_gᵀ``).
    With ``groups == 1`` this is :func:`matmul`.
    """
    if groups < 1 or a.rows % groups or b.rows % groups:
        raise DimensionError(f"cannot split {a.shape} and {b.shape} into {groups} groups")
    A = a.data.reshape(groups, a.rows // groups, a.cols)
    B = b.data.reshape(groups, b.rows // groups, b.cols)
    inner = B.shape[2] if transpose_b else B.shape[1]
    if A.shape[2] != inner:
        raise DimensionError(
            f"grouped matmul shape mismatch: blocks {A.shape[1:]} @ {B.shape[1:]}"
            f"{' transposed' if transpose_b else ''}"
        )
    Bop = B.transpose(0, 2, 1) if transpose_b else B
    out = np.matmul(A, Bop)
    need_a, need_b = a.tape is not None, b.tape is not None

    def back(g):
        G = g.reshape(out.shape)
        ga = np.matmul(G, Bop.transpose(0, 2, 1)).reshape(a.shape) if need_a else None
        gb = None
        if need_b:
            gb = np.matmul(G.transpose(0, 2, 1), A) if transpose_b else np.matmul(A.transpose(0, 2, 1), G)
            gb = gb.reshape(b.shape)
        return ga, gb

    return record(out.reshape(-1, out.shape[2]), (a, b), back)


def transpose(a: Tensor) -> Tensor:
    return record(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(axis: str, *tensors: Tensor) -> Tensor:
    """Stack tensors along ``"rows"`` or ``"cols"``."""
    if axis not in ("rows", "cols"):
        raise ContractError(f"axis must be 'rows' or 'cols', got {axis!r}")
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ax = 0 if axis == "rows" else 1
    other = 1 - ax
    for t in tensors[1:]:
        if t.shape[other] != tensors[0].shape[other]:
            shapes = ", ".join(str(x.shape) for x in tensors)
            raise DimensionError(f"concat along {axis} needs matching {'cols' if ax == 0 else 'rows'}: {shapes}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=ax))

    return record(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def split_cols(a: Tensor, widths: Sequence[int]) -> list[Tensor]:
    if sum(widths) != a.cols or any(w < 0 for w in widths):
        raise DimensionError(f"widths {list(widths)} do not partition {a.cols} columns")
    out = []
    start = 0
    for w in widths:
        lo, hi = start, start + w

        def back(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            return (full,)

        out.append(record(a.data[:, lo:hi].copy(), (a,), back))
        start = hi
    return out


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Repeat each row ``times`` times consecutively (row r -> rows r*times..)."""
    if times < 1:
        raise ContractError("times must be >= 1")
    rows, cols = a.shape

    def back(g):
        return (g.reshape(rows, times, cols).sum(axis=1),)

    return record(np.repeat(a.data, times, axis=0), (a,), back)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major reshape."""
    if rows * cols != a.data.size:
        raise DimensionError(f"cannot reshape {a.shape} to {(rows, cols)}")
    shape = a.shape
    return record(a.data.reshape(rows, cols).copy(), (a,), lambda g: (g.reshape(shape),))


def take_rows(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    distinct = np.unique(idx).size == idx.size

    def back(g):
        full = np.zeros_like(a.data)
        if distinct:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record(a.data[idx], (a,), back)


# ---------------------------------------------------------------- element-wise


def _sigmoid(x):
    return expit(x)


_UNARY = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
}


def ew_unary(kind: str, a: Tensor) -> Tensor:
    try:
        fn, deriv = _UNARY[kind]
    except KeyError:
        raise ContractError(f"unknown unary op {kind!r}") from None
    x = a.data
    y = fn(x)
    return record(y, (a,), lambda g: (g * deriv(x, y),))


def sigmoid(a: Tensor) -> Tensor:
    return ew_unary("sigmoid", a)


def tanh(a: Tensor) -> Tensor:
    return ew_unary("tanh", a)


def relu(a: Tensor) -> Tensor:
    return ew_unary("relu", a)


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape:
        return
    r_ok = b.rows == a.rows or b.rows == 1
    c_ok = b.cols == a.cols or b.cols == 1
    if not (r_ok and c_ok):
        raise DimensionError(f"{kind}: cannot broadcast {b.shape} onto {a.shape}")


def ew_binary(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Element-wise add/sub/mul; ``b`` may be a single row or column."""
    _check_broadcast(a, b, kind)
    A, B = a.data, b.data
    if kind == "add":
        out = A + B

        def back(g):
            return g, _reduce_to(g, B.shape)
    elif kind == "sub":
        out = A - B

        def back(g):
            return g, _reduce_to(-g, B.shape)
    elif kind == "mul":
        out = A * B

        def back(g):
            return g * B, _reduce_to(g * A, B.shape)
    else:
        raise ContractError(f"unknown binary op {kind!r}")
    return record(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.shape != a.shape and a.shape[0] * a.shape[1] < b.shape[0] * b.shape[1]:
        a, b = b, a
    return ew_binary("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return ew_binary("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if b.shape != a.shape and a.shape[0] * a.shape[1] < b.shape[0] * b.shape[1]:
        a, b = b, a
    return ew_binary("mul", a, b)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record(a.data * s, (a,), lambda g: (g * s,))


# ---------------------------------------------------------------- softmax / reductions


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, max-shifted so large logits cannot overflow."""
    x = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record(y, (a,), back)


def reduce(kind: str, a: Tensor) -> Tensor:
    if kind == "sum":
        shape = a.shape
        return record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))
    if kind == "mean":
        shape = a.shape
        n = a.data.size
        return record(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))
    raise ContractError(f"unknown reduction {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    return reduce("sum", a)


def mean_all(a: Tensor) -> Tensor:
    return reduce("mean", a)


# ---------------------------------------------------------------- reverse mode


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every leaf on its tape.

    Leaves that do not reach the loss get zero arrays.
    """
    tape = tape if tape is not None else loss.tape
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None or loss.tape is not tape:
        raise ContractError("loss is not recorded on the given tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or inp.tape is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {leaf: grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in tape.leaves}


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences of scalar ``f`` with respect to each parameter entry."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(work))
            flat[i] = orig - eps
            fm = float(f(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


def max_relative_error(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """max |g1-g2| / max(1e-8, |g1|+|g2|) over all entries of matching keys."""
    if set(a) != set(b):
        raise ContractError("gradient maps have different keys")
    worst = 0.0
    for k in a:
        g1, g2 = np.asarray(a[k]), np.asarray(b[k])
        rel = np.abs(g1 - g2) / np.maximum(1e-8, np.abs(g1) + np.abs(g2))
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst
