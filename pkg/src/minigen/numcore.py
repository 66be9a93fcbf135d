"""Dense tensors with reverse-mode automatic differentiation.

Every primitive records a node (inputs plus a closure mapping the output
adjoint to input adjoints). ``backward`` linearises the graph reachable from
a scalar loss into a :class:`Tape` and replays it in reverse.

Storage is a plain row-major numpy array. Two dtypes are in use: float64 for
gradient checks, float32 for training.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, NonFiniteError, PreconditionError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concatenate",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "dropout",
    "sum",
    "mean",
    "masked_cross_entropy",
    "backward",
    "no_grad",
    "detect_anomaly",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _anomaly() -> bool:
    return getattr(_state, "anomaly", False)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording graph nodes (evaluation / decoding)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True):
    """Halt with :class:`NonFiniteError` on the first op producing NaN/Inf."""
    prev = _anomaly()
    _state.anomaly = enabled
    try:
        yield
    finally:
        _state.anomaly = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, order="C")
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    op: str,
) -> Tensor:
    if _anomaly() and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out._parents = ()
    out._backward = None
    out.grad = None
    out.requires_grad = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)

    def bw(g):
        return (g * k,)

    return _make(x.data * k, (x,), bw, "scale")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation, as used by GPT-style models."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    x2 = xd * xd
    inner = c * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        return (g * d,)

    return _make(out, (x,), bw, "gelu")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise PreconditionError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def bw(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), bw, "dropout")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise PreconditionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), bw, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(tuple(shape))

    def bw(g):
        return (g.reshape(src),)

    return _make(out, (x,), bw, "reshape")


def concatenate(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise PreconditionError("concatenate needs at least one tensor")
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concatenate")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (shape [V, d]) for an integer id array."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise PreconditionError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise PreconditionError(f"embedding id out of range [0, {vocab})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------------------
# reductions and normalisation
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise PreconditionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_np(x.data, axis)
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply learned gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def bw(g):
        dxhat = g * gain.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over positions where mask == 1.

    ``logits`` has shape [..., V]; ``targets`` and ``mask`` share the leading
    shape. Rows with mask 0 are never read, so their logits cannot influence
    the loss and receive an exactly-zero gradient.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    lead, vocab = logits.shape[:-1], logits.shape[-1]
    if targets.shape != lead or mask.shape != lead:
        raise PreconditionError(f"targets {targets.shape} / mask {mask.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise PreconditionError(f"target id out of range [0, {vocab})")
    if not np.all((mask == 0) | (mask == 1)):
        raise PreconditionError("loss mask must be 0/1")
    flat_mask = mask.reshape(-1).astype(bool)
    rows = np.flatnonzero(flat_mask)
    if rows.size == 0:
        raise DegenerateInputError("loss mask selects no positions")
    flat_logits = logits.data.reshape(-1, vocab)
    picked = flat_logits[rows]
    tgt = targets.reshape(-1)[rows]
    lp = _log_softmax_np(picked, -1)
    n = rows.size
    loss = -lp[np.arange(n), tgt].sum() / n

    def bw(g):
        gsel = np.exp(lp)
        gsel[np.arange(n), tgt] -= 1.0
        gsel *= g / n
        full = np.zeros_like(flat_logits)
        full[rows] = gsel
        return (full.reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "masked_cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


class Tape:
    """Ops reachable from a root, in an order where inputs precede outputs."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p._backward is not None:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> None:
        adjoints: dict[int, np.ndarray] = {id(root): seed_grad}
        check = _anomaly()
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if check and not np.all(np.isfinite(pg)):
                    raise NonFiniteError(node.op, "backward")
                if parent._backward is None:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    key = id(parent)
                    if key in adjoints:
                        adjoints[key] = adjoints[key] + pg
                    else:
                        adjoints[key] = pg


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise PreconditionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise PreconditionError("loss is not on a tape (no grad-requiring inputs)")
    tape = Tape.from_root(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
