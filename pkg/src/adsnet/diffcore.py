"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`. Outside
any tape they run in inference mode: values are computed, nothing is
recorded and outputs never require gradients.

    >>> w = Parameter(np.array([1.0, 2.0, 3.0]))
    >>> with Tape() as tape:
    ...     loss = sum_(mul(w.tensor(), w.tensor()))
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

from itertools import combinations
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
PROB_CLAMP = 1e-12


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""


class Tensor:
    __slots__ = ("data", "requires_grad", "param")

    def __init__(self, data, requires_grad=False, param=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter:
    """A learnable array with an accumulated gradient.

    Sparse parameters (embedding tables) additionally remember which rows were
    touched since the last ``zero_grad`` so optimizers can work on those rows
    only.
    """

    def __init__(self, value, name="", sparse=False):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.sparse = sparse
        self._touched: list[np.ndarray] = []

    @property
    def shape(self):
        return self.value.shape

    def tensor(self) -> Tensor:
        return Tensor(self.value, requires_grad=True, param=self)

    def touch(self, rows):
        self._touched.append(np.asarray(rows, dtype=np.int64))

    def touched_rows(self) -> np.ndarray:
        if not self._touched:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(self._touched))

    def sparse_grad(self):
        """Row-index array and the matching dense gradient rows."""
        rows = self.touched_rows()
        return rows, self.grad[rows]

    def zero_grad(self):
        if self.sparse:
            rows = self.touched_rows()
            self.grad[rows] = 0.0
            self._touched = []
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, sparse={self.sparse})"


class Node:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications, consumed by ``backward``."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(parameter) into every reachable Parameter."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            self.nodes = []
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.param is not None:
                    inp.param.grad += gi
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        self.nodes = []


def _record(kind, inputs, out_data, backward) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(kind, inputs, out, backward))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def concat(tensors: Sequence[Tensor], axis=1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: mismatched shapes {[x.shape for x in tensors]}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", tuple(tensors), out,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_cols", (a,), a.data[:, start:stop], backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data == 0.0):
        raise ShapeError("reciprocal: zero entry in input")
    out = 1.0 / a.data
    return _record("reciprocal", (a,), out, lambda g: (-g * out * out,))


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), out, backward)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", (a,), out, backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.data.size == 0:
        raise ShapeError("mean: empty input")
    n = a.data.size
    shape = a.shape
    return _record("mean", (a,), a.data.mean(), lambda g: (np.full(shape, g / n),))


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    if a.data.size == 0:
        raise ShapeError("mse: empty input")
    diff = a.data - b.data
    n = diff.size
    return _record("mse", (a, b), np.mean(diff * diff),
                   lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n))


def bce(p, y) -> Tensor:
    """Elementwise binary cross-entropy, probabilities clamped to [1e-12, 1-1e-12]."""
    p, y = as_tensor(p), as_tensor(y)
    if p.shape != y.shape:
        raise ShapeError(f"bce: shape mismatch {p.shape} vs {y.shape}")
    pc = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p.data >= PROB_CLAMP) & (p.data <= 1.0 - PROB_CLAMP)
    yd = y.data
    out = -yd * np.log(pc) - (1.0 - yd) * np.log1p(-pc)

    def backward(g):
        gp = g * inside * (-yd / pc + (1.0 - yd) / (1.0 - pc))
        gy = g * (np.log1p(-pc) - np.log(pc))
        return (gp, gy)

    return _record("bce", (p, y), out, backward)


def detach(a) -> Tensor:
    """Constant copy of ``a``; gradients never flow through it."""
    return Tensor(as_tensor(a).data)


def embedding(param: Parameter, ids) -> Tensor:
    """Row lookup ``param.value[ids]``; backward scatters into the touched rows."""
    ids = np.asarray(ids, dtype=np.int64)
    table = param.value
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])][0]
        raise IndexError(f"embedding {param.name!r}: id {bad} out of range [0, {table.shape[0]})")
    leaf = param.tensor()

    def backward(g):
        rows, inverse = np.unique(ids, return_inverse=True)
        acc = np.zeros((rows.size, table.shape[1]))
        np.add.at(acc, inverse, g)
        param.grad[rows] += acc
        param.touch(rows)
        return (None,)

    return _record("embedding", (leaf,), table[ids], backward)


def pairwise_dots(fields: Sequence[Tensor]) -> Tensor:
    """(B, C(F, 2)) matrix of row-wise inner products <e_i, e_j> for i < j."""
    fields = [as_tensor(f) for f in fields]
    if len(fields) < 2:
        raise ShapeError("pairwise_dots: needs at least two fields")
    ref = fields[0].shape
    if any(f.shape != ref or f.data.ndim != 2 for f in fields):
        raise ShapeError(f"pairwise_dots: mismatched shapes {[f.shape for f in fields]}")
    pairs = list(combinations(range(len(fields)), 2))
    data = [f.data for f in fields]
    out = np.stack([np.einsum("bd,bd->b", data[i], data[j]) for i, j in pairs], axis=1)

    def backward(g):
        grads = [np.zeros(ref) for _ in fields]
        for p, (i, j) in enumerate(pairs):
            gp = g[:, p:p + 1]
            grads[i] += gp * data[j]
            grads[j] += gp * data[i]
        return tuple(grads)

    return _record("pairwise_dots", tuple(fields), out, backward)


def take(a, index) -> Tensor:
    """Gather entries of the flattened tensor at ``index``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def backward(g):
        full = np.zeros(a.data.size)
        np.add.at(full, index, g)
        return (full.reshape(shape),)

    return _record("take", (a,), a.data.reshape(-1)[index], backward)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "concat": lambda *xs: concat(xs),
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "exp": exp,
    "reciprocal": reciprocal,
    "sum": sum_,
    "mean": mean,
    "mse": mse,
    "bce": bce,
    "pairwise_dots": lambda *xs: pairwise_dots(xs),
}


def forward_primitive(kind: str, inputs: Sequence) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*[as_tensor(x) for x in inputs])


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                            eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds a scalar loss from the current parameter values on every
    call. The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grad(params)
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("finite_difference_check: loss is not finite")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    zero_grad(params)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"finite_difference_check: non-finite loss at {p.name}[{i}]")
            numeric = (up - down) / (2.0 * eps)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
