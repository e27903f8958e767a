"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every primitive applied to at least one tracked operand appends its output to
the active (thread-local) tape.  ``backward`` walks the tape in reverse
creation order, so the tape is always a valid topological order.  The tape is
never cleared implicitly; training code calls :func:`clear_tape` between
steps.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "Tape", "Adam", "SGD", "apply_primitive", "backward", "clear_tape",
    "current_tape", "finite_diff_check", "no_grad", "parameter", "PRIMITIVES",
]


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.generation = 0

    def record(self, t: "Tensor") -> None:
        t.node_id = len(self.nodes)
        t._gen = self.generation
        self.nodes.append(t)

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def clear_tape() -> None:
    current_tape().clear()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A float64 array that may take part in the recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "node_id", "_gen",
                 "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id: int | None = None
        self._gen = -1
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; every operator routes through a primitive
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
        current_tape().record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "multiply")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {ad.shape} and {bd.shape} differ")
    k = ad.shape[-1]

    def grad_fn(g):
        if bd.ndim == 1:
            ga = g[..., None] * bd
            gb = (ad * g[..., None]).reshape(-1, k).sum(axis=0)
        elif bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), grad_fn, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=ax), ts, grad_fn, "concat")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid_np(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = _as_tensor(x)
    if x.ndim == 0:
        raise ShapeError("softmax: needs at least one axis")
    y = _softmax_np(x.data)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError(f"log: nonpositive input (min {x.data.min():.3g})")
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding-lookup: ids out of range for table {table.shape}")
    shape = table.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), grad_fn, "embedding")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), grad_fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    shape = x.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), grad_fn, "mean")


def max_(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    idx = np.expand_dims(xd.argmax(axis=axis), axis)

    def grad_fn(g):
        full = np.zeros_like(xd)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(np.take_along_axis(xd, idx, axis=axis).squeeze(axis), (x,), grad_fn, "max")


def slice_(x, index) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    try:
        y = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {shape}") from None

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in parts)

    def grad_fn(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(y), (x,), grad_fn, "slice")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient flows only where the input was inside the range."""
    x = _as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (evaluation mode) or rate is 0."""
    x = _as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul, "add": add, "sub": sub, "multiply": multiply, "concat": concat,
    "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax, "log": log, "exp": exp,
    "embedding": embedding, "sum": sum_, "mean": mean, "max": max_, "slice": slice_,
    "reshape": reshape, "dropout": dropout, "clip": clip,
}


def apply_primitive(op_name: str, inputs: Sequence, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op_name]
    except KeyError:
        raise ContractError(f"unknown primitive {op_name!r}") from None
    if op_name == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward

def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every tracked tensor reachable from scalar ``root``.

    Leaf gradients accumulate across calls; intermediate gradients are
    overwritten with the values from this call.
    """
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    seed = np.ones_like(root.data)
    if root.node_id is None:
        root.grad = seed if root.grad is None else root.grad + seed
        return
    tape = current_tape()
    if root._gen != tape.generation or root.node_id >= len(tape.nodes) \
            or tape.nodes[root.node_id] is not root:
        raise ContractError("backward: root is not on the active tape")
    pending: dict[int, np.ndarray] = {root.node_id: seed}
    for node in reversed(tape.nodes[: root.node_id + 1]):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id is None or parent._gen != tape.generation:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- optimizers

class _Optimizer:
    kind = ""

    def __init__(self, params: Iterable[Tensor], lr: float, clip_norm: float | None = None):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.clip_norm = clip_norm
        self.step_count = 0

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"optimizer: parameter {p.name or i!r} has no gradient")
            grads.append(p.grad)
        if self.clip_norm:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.clip_norm:
                grads = [g * (self.clip_norm / total) for g in grads]
        return grads

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = self._grads()
        self.step_count += 1
        self._apply(grads)
        self.zero_grad()

    def state_dict(self) -> dict:
        return {"step_count": self.step_count}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])


class SGD(_Optimizer):
    kind = "SGD"

    def _apply(self, grads):
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g


class Adam(_Optimizer):
    kind = "Adam"

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None):
        super().__init__(params, lr, clip_norm)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _apply(self, grads):
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"step_count": self.step_count, "m": [a.copy() for a in self.m],
                "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        super().load_state_dict(state)
        for dst, src in zip(self.m + self.v, list(state["m"]) + list(state["v"])):
            if dst.shape != np.shape(src):
                raise ShapeError(f"optimizer state shape {np.shape(src)} != {dst.shape}")
            dst[...] = src


def optimizer_step(opt: _Optimizer) -> None:
    opt.step()


# ---------------------------------------------------------- gradient checks

FD_FLOOR = 1e-6


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      epsilon: float = 1e-5, max_coords: int | None = 40,
                      seed: int = 0) -> float:
    """Max normwise relative error between backprop and central differences.

    Per parameter the error is ``|a - n| / max(|a| + |n|, FD_FLOOR)`` over the
    sampled coordinates, so gradients far below finite-difference rounding noise
    do not blow up the ratio.  ``loss_fn`` takes no arguments and reads
    ``params`` directly.  At most ``max_coords`` coordinates per parameter are
    sampled (all when None).
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError("finite_diff_check: epsilon must lie in (0, 1e-2]")
    with no_grad():
        a, b = loss_fn().data, loss_fn().data
    if not np.array_equal(a, b):
        raise ContractError("finite_diff_check: loss_fn is not deterministic")

    for p in params:
        p.grad = None
    clear_tape()
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    clear_tape()

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if max_coords is None or n <= max_coords \
                else rng.choice(n, size=max_coords, replace=False)
            numeric = np.empty(len(coords))
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = float(np.sum(loss_fn().data))
                flat[i] = orig - epsilon
                down = float(np.sum(loss_fn().data))
                flat[i] = orig
                numeric[j] = (up - down) / (2 * epsilon)
            an = ga.reshape(-1)[coords]
            diff = np.linalg.norm(an - numeric)
            if diff:
                worst = max(worst, diff / max(np.linalg.norm(an) + np.linalg.norm(numeric), FD_FLOOR))
    for p in params:
        p.grad = None
    return worst
