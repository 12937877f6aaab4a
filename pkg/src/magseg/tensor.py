"""Dense float64 tensors with a minimal reverse-mode tape.

Only the operations needed by the fusion module, the distillation losses and
the toy segmentation network are provided. Every tensor wraps a read-only
numpy array; operations on tensors that require gradients append a node to
the calling thread's active :class:`Tape`.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "as_tensor",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "relu",
    "maximum",
    "clip",
    "stack",
    "softmax",
    "cosine",
    "kl_div",
    "cross_entropy",
    "backward",
    "grad_check",
    "grad_check_report",
]

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = [Tape()]
        _local.tapes = stack
    return stack


def active_tape() -> "Tape":
    return _tape_stack()[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording on the current thread."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class _Node:
    __slots__ = ("parents", "backward_fn", "tape", "index", "__weakref__")

    def __init__(self, parents, backward_fn, tape, index):
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Append order is a valid topological order, so backward simply walks the
    list in reverse. A tape can be consumed by :meth:`backward` once; calling
    it again before :meth:`reset` raises :class:`StateError`. Recording a new
    operation on a consumed tape starts a fresh recording.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.spent = False

    def _record(self, parents, backward_fn) -> _Node:
        if self.spent:
            self.reset()
        node = _Node(parents, backward_fn, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.tape is not self:
            raise StateError("loss was not recorded on this tape")
        if self.spent:
            raise StateError("tape already consumed by backward(); call reset() first")
        if node.index >= len(self.nodes) or self.nodes[node.index] is not node:
            raise StateError("loss node is no longer on the tape")

        grads: dict[int, np.ndarray] = {id(node): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        leaf_grads: dict[int, np.ndarray] = {}
        for n in reversed(self.nodes[: node.index + 1]):
            for p in n.parents:
                if p.requires_grad and p._node is None:
                    leaves.setdefault(id(p), p)
            g = grads.pop(id(n), None)
            if g is None:
                continue
            for p, pg in zip(n.parents, n.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is not None:
                    key, store = id(p._node), grads
                else:
                    key, store = id(p), leaf_grads
                prev = store.get(key)
                store[key] = pg if prev is None else prev + pg
        for key, leaf in leaves.items():
            g = leaf_grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g).reshape(leaf.shape)
        self.spent = True


def backward(loss: "Tensor") -> None:
    """Run reverse-mode accumulation from ``loss`` on the tape that recorded it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise StateError("loss is not on any tape")
    loss._node.tape.backward(loss)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = _freeze(np.array(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        t.data = _freeze(arr)
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node(self):
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=5)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(np.asarray(data))
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = active_tape()._record(tuple(parents), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` against a constant floor."""
    a = as_tensor(a)
    mask = a.data >= floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name (``add``, ``mul``, ``exp``...)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise DomainError(f"unknown elementwise op {kind!r}") from None
    if kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise DomainError(f"{kind} needs two operands")
        return fn(a, b)
    return fn(a)


# -- reductions and shape ---------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        n = 1
        for ax in axis if isinstance(axis, tuple) else (axis,):
            n *= shape[ax]
    scale = 1.0 / n

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("stack of zero tensors")
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeError("stack needs tensors of one shape")
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- fused primitives used by the losses -------------------------------------


def softmax(v, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    v = as_tensor(v)
    z = v.data / temperature
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)) / temperature,)

    return _make(s, (v,), bw)


def cosine(u, v, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along ``axis``; norms are floored at ``eps``, result clipped to [-1, 1]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim == 1 and v.ndim == 1 and u.shape != v.shape:
        raise ShapeError(f"vector lengths differ: {u.shape[0]} vs {v.shape[0]}")
    _broadcast_shape(u, v)
    ud, vd = u.data, v.data
    dot = (ud * vd).sum(axis=axis, keepdims=True)
    ru = np.sqrt((ud * ud).sum(axis=axis, keepdims=True))
    rv = np.sqrt((vd * vd).sum(axis=axis, keepdims=True))
    nu, nv = np.maximum(ru, eps), np.maximum(rv, eps)
    raw = dot / (nu * nv)
    out = np.clip(raw, -1.0, 1.0)

    def bw(g):
        g = np.expand_dims(g, axis) * ((raw >= -1.0) & (raw <= 1.0))
        s = g / (nu * nv)
        gu = s * vd - np.where(ru >= eps, g * raw / (nu * nu), 0.0) * ud
        gv = s * ud - np.where(rv >= eps, g * raw / (nv * nv), 0.0) * vd
        return _unbroadcast(gu, ud.shape), _unbroadcast(gv, vd.shape)

    return _make(np.squeeze(out, axis=axis), (u, v), bw)


def kl_div(p, q, eps: float = 1e-12, axis: int = -1, atol: float = 1e-6) -> Tensor:
    """``sum p * log((p + eps) / (q + eps))`` along ``axis``.

    Gradients reach whichever operand requires them; pass a detached ``p``
    to treat it as a fixed target.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or not np.all(np.isfinite(t.data)):
            raise DomainError(f"{name} has negative or non-finite entries")
        if np.any(np.abs(t.data.sum(axis=axis) - 1.0) > atol):
            raise DomainError(f"{name} does not sum to 1 along axis {axis}")
    pd, qd = p.data, q.data
    ratio = np.log(pd + eps) - np.log(qd + eps)

    def bw(g):
        g = np.expand_dims(g, axis)
        return g * (ratio + pd / (pd + eps)), -g * pd / (qd + eps)

    return _make((pd * ratio).sum(axis=axis), (p, q), bw)


def cross_entropy(logits, labels, ignore_index: int = 255) -> Tensor:
    """Mean per-pixel cross-entropy; ``logits`` is ``K x ...``, ``labels`` is ``...``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[0]
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise DomainError(f"label outside 0..{k - 1} and not ignore_index")
    n = int(valid.sum())
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    safe = np.where(valid, labels, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[None], axis=0)[0]
    loss = -(picked * valid).sum() / n if n else 0.0

    def bw(g):
        if n == 0:
            return (np.zeros(logits.shape),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[None], np.take_along_axis(grad, safe[None], axis=0) - 1.0, axis=0)
        return (grad * valid[None] * (g / n),)

    return _make(np.asarray(loss, dtype=np.float64), (logits,), bw)


# -- gradient checking -------------------------------------------------------


class GradCheckResult:
    __slots__ = ("max_error", "input_index", "flat_index", "analytic", "numeric")

    def __init__(self, max_error, input_index, flat_index, analytic, numeric):
        self.max_error = max_error
        self.input_index = input_index
        self.flat_index = flat_index
        self.analytic = analytic
        self.numeric = numeric

    def __repr__(self) -> str:
        return (
            f"GradCheckResult(max_error={self.max_error:.3e}, input={self.input_index}, "
            f"coord={self.flat_index})"
        )


def grad_check_report(f: Callable[..., Tensor], inputs: Iterable, eps: float = 1e-5) -> GradCheckResult:
    """Compare tape gradients of scalar ``f(*inputs)`` to central differences."""
    arrays = [np.array(as_tensor(x).data) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        if out.requires_grad:
            tape.backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    args = [Tensor._wrap(a.copy()) for a in arrays]

    def evaluate():
        with no_grad():
            return float(f(*args).data)

    worst = GradCheckResult(0.0, None, None, 0.0, 0.0)
    for i, base in enumerate(arrays):
        work = base.copy()
        args[i] = Tensor._wrap(work)
        work.flags.writeable = True
        flat = work.reshape(-1)
        for j in range(flat.size):
            x0 = flat[j]
            flat[j] = x0 + eps
            fp = evaluate()
            flat[j] = x0 - eps
            fm = evaluate()
            flat[j] = x0
            num = (fp - fm) / (2 * eps)
            ad = float(analytic[i].reshape(-1)[j])
            err = abs(ad - num) / max(1e-8, abs(ad) + abs(num))
            if err > worst.max_error or worst.input_index is None:
                worst = GradCheckResult(err, i, j, ad, num)
        work.flags.writeable = False
        args[i] = Tensor._wrap(arrays[i])
    return worst


def grad_check(f: Callable[..., Tensor], inputs: Iterable, eps: float = 1e-5) -> float:
    """Maximum relative error between tape and central-difference gradients."""
    return grad_check_report(f, inputs, eps).max_error
