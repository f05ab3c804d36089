"""Dense float64 arrays with a small reverse-mode gradient tape.

Only the primitives needed by the GCN -> cosine tree -> cross-entropy graph
are provided. Every backward rule is written in terms of the same taped
operations, so gradients computed while an enclosing :class:`GradTape` is
recording are themselves differentiable (nested tapes give second-order
derivatives).

Usage::

    w = Tensor(np.ones((3, 2)))
    with GradTape() as tape:
        tape.watch(w)
        loss = tsum(matmul(x, w) * matmul(x, w))
    (dw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from typing import Any

import numpy as np

from metadt.errors import ContractError, DegenerateInputError, NumericError, ShapeError, TapeError

CE_EPSILON = 1e-12
NORM_FLOOR = 1e-12

_TAPES: list[GradTape] = []


class Tensor:
    """An immutable float64 array value that gradient tapes can track."""

    __slots__ = ("data",)
    __array_priority__ = 100

    def __init__(self, data: Any):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r})"

    def __len__(self) -> int:
        return len(self.data)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


Backward = Callable[[Tensor, Tensor], Sequence["Tensor | None"]]


class _Node:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: tuple[Tensor, ...], output: Tensor, backward: Backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Records primitive operations on watched tensors for reverse-mode replay.

    Tapes nest: operations executed while computing the gradient of an inner
    tape are recorded by any enclosing tape that tracks their inputs.
    A tape belongs to one thread; do not share it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []
        self._recording = True

    def __enter__(self) -> GradTape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensor values, got {type(t).__name__}")
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._watched.append(t)

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._tracked.add(id(node.output))

    def gradient(self, loss: Tensor, sources: Iterable[Tensor] | None = None) -> list[Tensor]:
        """Gradients of scalar ``loss`` w.r.t. ``sources`` (default: every watched tensor)."""
        if not isinstance(loss, Tensor) or id(loss) not in self._tracked:
            raise TapeError("loss was not recorded on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        sources = list(self._watched) if sources is None else list(sources)
        for s in sources:
            if id(s) not in self._tracked:
                raise TapeError("gradient requested for a tensor this tape does not track")

        adjoints: dict[int, Tensor] = {id(loss): Tensor(np.ones_like(loss.data))}
        self._recording = False
        try:
            for node in reversed(self.nodes):
                g = adjoints.get(id(node.output))
                if g is None:
                    continue
                for inp, gi in zip(node.inputs, node.backward(g, node.output)):
                    if gi is None or id(inp) not in self._tracked:
                        continue
                    key = id(inp)
                    adjoints[key] = gi if key not in adjoints else add(adjoints[key], gi)
        finally:
            self._recording = True
        return [adjoints.get(id(s), Tensor(np.zeros_like(s.data))) for s in sources]


def backward(tape: GradTape, loss: Tensor) -> list[Tensor]:
    """Gradients of ``loss`` for every tensor watched by ``tape``, in watch order."""
    return tape.gradient(loss)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], bw: Backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor(data)
    for tape in _TAPES:
        if tape._recording and any(id(t) in tape._tracked for t in inputs):
            tape._record(_Node(name, inputs, out, bw))
    return out


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g, out: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, out):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(neg(mul(ga, out)), b.shape)

    return _emit("div", a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g, out: (neg(g),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _emit("exp", data, (a,), lambda g, out: (mul(g, out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _emit("log", data, (a,), lambda g, out: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        data = np.sqrt(a.data)
    return _emit("sqrt", data, (a,), lambda g, out: (div(g, mul(out, 2.0)),))


def relu(x) -> Tensor:
    """Elementwise ``max(0, x)``; the gradient is the 0/1 mask of ``x > 0``."""
    x = as_tensor(x)
    mask = Tensor((x.data > 0).astype(np.float64))
    return _emit("relu", x.data * mask.data, (x,), lambda g, out: (mul(g, mask),))


# -- shape and reductions ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g, out: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit("transpose", a.data.T, (a,), lambda g, out: (transpose(g),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g, out: (reshape(g, a.shape),))


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g, out):
        if axis is not None and not keepdims:
            g = reshape(g, np.expand_dims(out.data, axis).shape)
        return (broadcast_to(g, a.shape),)

    return _emit("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return div(tsum(a, axis=axis), float(n))


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return _emit("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, out: (sum_to(g, a.shape),))


def _unbroadcast(data: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while data.ndim > len(shape):
        data = data.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and data.shape[axis] != 1:
            data = data.sum(axis=axis, keepdims=True)
    return data


def sum_to(a, shape: tuple[int, ...]) -> Tensor:
    """Sum out broadcast dimensions so the result has ``shape``."""
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return _emit("sum_to", _unbroadcast(a.data, tuple(shape)), (a,),
                 lambda g, out: (broadcast_to(g, a.shape),))


def gather(a, index) -> Tensor:
    """``a[index]`` for a numpy basic or advanced index."""
    a = as_tensor(a)
    return _emit("gather", np.asarray(a.data[index], dtype=np.float64), (a,),
                 lambda g, out: (scatter(g, index, a.shape),))


def scatter(a, index, shape: tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``a`` accumulated at ``index``."""
    a = as_tensor(a)
    data = np.zeros(shape)
    np.add.at(data, index, a.data)
    return _emit("scatter", data, (a,), lambda g, out: (gather(g, index),))


# -- composites used by the model ------------------------------------------------


def row_norms(x) -> Tensor:
    x = as_tensor(x)
    norms = sqrt(tsum(mul(x, x), axis=-1, keepdims=True))
    if norms.data.size and norms.data.min() < NORM_FLOOR:
        raise DegenerateInputError("vector norm below 1e-12; a direction is undefined")
    return norms


def row_normalize(x) -> Tensor:
    x = as_tensor(x)
    return div(x, row_norms(x))


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between two equal-length vectors (scalar tensor)."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {u.shape} and {v.shape}")
    nu, nv = row_norms(u), row_norms(v)
    return div(tsum(mul(u, v)), mul(nu, nv))


def cosine_matrix(x, w) -> Tensor:
    """Pairwise cosines between the rows of ``x`` (n x d) and ``w`` (m x d)."""
    return matmul(row_normalize(x), transpose(row_normalize(w)))


def softmax_scaled(logits, gamma: float = 1.0) -> Tensor:
    """``softmax(gamma * logits)`` along the last axis, max-shifted for stability."""
    logits = as_tensor(logits)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = mul(logits, float(gamma))
    e = exp(sub(z, Tensor(np.max(z.data, axis=-1, keepdims=True))))
    return div(e, tsum(e, axis=-1, keepdims=True))


def cross_entropy(probs, label: int) -> Tensor:
    """``-log(probs[label] + 1e-12)`` for one probability vector."""
    probs = as_tensor(probs)
    if probs.ndim != 1:
        raise ShapeError(f"cross_entropy expects a vector, got shape {probs.shape}")
    if not 0 <= label < probs.shape[0]:
        raise IndexError(f"label {label} out of range for {probs.shape[0]} classes")
    if abs(probs.data.sum() - 1.0) > 1e-6:
        raise ContractError(f"probabilities sum to {probs.data.sum()!r}, not 1")
    return neg(log(add(gather(probs, (int(label),)), CE_EPSILON)))


def mean_cross_entropy(probs, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Average cross-entropy of the rows of ``probs`` (n x N) against ``labels``."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeError(f"probs {probs.shape} incompatible with {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise IndexError(f"labels must lie in [0, {probs.shape[1]})")
    picked = gather(probs, (np.arange(labels.size), labels))
    return neg(mean(log(add(picked, CE_EPSILON))))
