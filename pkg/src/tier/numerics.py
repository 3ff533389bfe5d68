"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation whose inputs live on it. Tensors
created without a tape are constants: operations on constants only return
constants and record nothing, so the same forward code serves both
training (params bound to a tape) and inference (plain arrays).

Every op output is checked for NaN/Inf and raises :class:`NonFiniteError`
naming the op, which gives the trainer its "first non-finite tensor"
diagnostic for free.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, DimensionError, DomainError, NonFiniteError

NORM_EPS = 1e-12
PROB_SUM_TOL = 1e-9

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array that may participate in a differentiation tape."""

    __slots__ = ("data", "grad", "tape", "node_id", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64, order="C")  # keeps 0-d arrays 0-d
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.node_id = node_id
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Ordered record of operations for one forward pass.

    Not thread-safe; use one tape per thread.
    """

    _ids = itertools.count()

    def __init__(self):
        self.tape_id = next(Tape._ids)
        self.ops: list[tuple[int, tuple[int | None, ...], BackwardFn, str]] = []
        self.nodes: dict[int, Tensor] = {}
        self.leaves: list[int] = []
        self._next = 0

    def _register(self, tensor: Tensor) -> Tensor:
        tensor.tape = self
        tensor.node_id = self._next
        self.nodes[self._next] = tensor
        self._next += 1
        return tensor

    def leaf(self, array, name: str | None = None) -> Tensor:
        """Create a differentiable input (a parameter) on this tape."""
        t = Tensor(array, name=name)
        _check_finite(t.data, name or "leaf")
        self._register(t)
        self.leaves.append(t.node_id)
        return t

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        out = self._register(Tensor(data, name=op))
        ids = tuple(x.node_id if x.tape is self else None for x in inputs)
        self.ops.append((out.node_id, ids, backward, op))
        return out

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) to every leaf; sets ``leaf.grad``.

        Returns a mapping from leaf node-id to gradient. Leaves the loss
        does not depend on receive zeros.
        """
        if loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for out_id, in_ids, fn, _ in reversed(self.ops):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for node, gi in zip(in_ids, fn(g)):
                if node is None or gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
        result = {}
        for leaf_id in self.leaves:
            leaf = self.nodes[leaf_id]
            g = grads.get(leaf_id)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            result[leaf_id] = leaf.grad
        return result


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


# ----------------------------------------------------------------------------
# helpers


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("inputs belong to different tapes")
    return tape


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data, name=op)
    return tape.record(data, inputs, backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    return _make(
        da * db, (a, b), lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    out = da / db

    def back(g):
        return _unbroadcast(g / db, da.shape), _unbroadcast(-g * out / db, db.shape)

    return _make(out, (a, b), back, "div")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


# ----------------------------------------------------------------------------
# shape and reduction


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dims like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2 or da.shape[-1] != db.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {da.shape} @ {db.shape}")
    out = np.matmul(da, db)

    def back(g):
        ga = np.matmul(g, np.swapaxes(db, -1, -2))
        gb = np.matmul(np.swapaxes(da, -1, -2), g)
        return _unbroadcast(ga, da.shape), _unbroadcast(gb, db.shape)

    return _make(out, (a, b), back, "matmul")


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


def getitem(x, index) -> Tensor:
    """Basic or advanced indexing; the backward scatters with ``np.add.at``."""
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), back, "getitem")


def take(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` (embedding gather)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, *shape[1:]))
        return (full,)

    return _make(table.data[idx], (table,), back, "take")


# ----------------------------------------------------------------------------
# normalization, softmax, entropy, cross-entropy


def l2_normalize(v, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """Scale every slice along ``axis`` to unit Euclidean norm.

    Raises DegenerateVectorError when a slice has norm below ``eps``.
    """
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateVectorError(f"cannot normalize a slice with norm < {eps:g}")
    y = v.data / norm

    def back(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm,)

    return _make(y, (v,), back, "l2_normalize")


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax along ``axis``.

    ``mask`` (broadcastable bool array) marks admissible entries; masked-out
    entries get probability exactly 0.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ContractError("softmax slice with every entry masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (x,), back, "softmax")


def entropy(p, axis: int = -1) -> Tensor:
    """Shannon entropy in nats of each probability slice along ``axis``.

    Exact zeros contribute 0 (and receive zero gradient).
    """
    p = as_tensor(p)
    d = p.data
    if np.any(d < 0):
        raise DomainError("entropy of a negative probability")
    if np.any(np.abs(np.sum(d, axis=axis) - 1.0) > PROB_SUM_TOL):
        raise DomainError("entropy input slices must sum to 1")
    pos = d > 0
    logp = np.log(np.where(pos, d, 1.0))
    h = -np.sum(d * logp, axis=axis)

    def back(g):
        return (np.where(pos, -(logp + 1.0), 0.0) * np.expand_dims(g, axis),)

    return _make(h, (p,), back, "entropy")


def cross_entropy(logits, labels, axis: int = 1) -> Tensor:
    """Mean softmax cross-entropy of a 2-D logit matrix.

    With ``axis=1`` each row is a distribution over columns and row ``i``
    has target column ``labels[i]``; ``axis=0`` is the transposed case.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects a 2-D logit matrix")
    z = logits.data if axis == 1 else logits.data.T
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {labels.shape}")
    m = np.max(z, axis=1, keepdims=True)
    e = np.exp(z - m)
    s = np.sum(e, axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])
    p = e / s

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        d *= g / n
        return (d if axis == 1 else d.T,)

    return _make(np.asarray(loss), (logits,), back, "cross_entropy")
