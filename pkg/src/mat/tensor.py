"""Dense tensors with tape-based reverse-mode differentiation.

Values are plain numpy arrays. An op records itself on the innermost active
:class:`Tape` only when a tape is active and at least one operand requires a
gradient; outside a tape every op is a pure value computation.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = total(matmul(w, w))
    >>> tape.backward(loss)[w]
    array([[4., 4.],
           [4., 4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array, optionally a node of a computation tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __truediv__(self, c: float):
        return divide(self, c)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    parents: tuple
    backward: Optional[Backward] = None


class Tape:
    """Ordered record of differentiable ops, used as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}
        self._leaves: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def node_of(self, t: Tensor) -> Optional[int]:
        if t._tape is self:
            return t.node_id
        if not t.requires_grad:
            return None
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", ()))
            self._leaf_ids[id(t)] = nid
            self._leaves.append(t)
        return nid

    def record(self, out: Tensor, kind: str, parents: Sequence[Tensor], backward: Backward) -> None:
        pids = tuple(self.node_of(p) for p in parents)
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(kind, pids, backward))

    def backward(self, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
        """Gradients of scalar ``loss`` w.r.t. leaves.

        Returns a dict keyed by leaf tensor. With ``wrt`` every listed tensor
        is present; tensors that did not participate get zeros.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        leaf_grads: dict[int, np.ndarray] = {}
        if loss._tape is self:
            grads = {loss.node_id: np.ones_like(loss.data)}
            for nid in range(loss.node_id, -1, -1):
                g = grads.pop(nid, None)
                if g is None:
                    continue
                node = self.nodes[nid]
                if node.backward is None:
                    leaf_grads[nid] = g
                    continue
                for pid, pg in zip(node.parents, node.backward(g)):
                    if pid is None or pg is None:
                        continue
                    prev = grads.get(pid)
                    grads[pid] = pg if prev is None else prev + pg
        elif loss.requires_grad:
            raise ContractError("loss was not recorded on this tape")

        if wrt is None:
            wrt = self._leaves
        out = {}
        for t in wrt:
            nid = self._leaf_ids.get(id(t))
            g = leaf_grads.get(nid) if nid is not None else None
            if g is None:
                g = np.zeros_like(t.data)
            out[t] = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        return out


def _check_finite(kind: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{kind} produced non-finite values")


def record(kind: str, out: np.ndarray, parents: Sequence[Tensor], backward: Backward) -> Tensor:
    """Wrap a forward value and register its backward rule if a tape wants it."""
    _check_finite(kind, out)
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(out)
    t = Tensor(out, requires_grad=True)
    tape.record(t, kind, parents, backward)
    return t


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not agree") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a constant array."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", x.data * c, (x,), lambda g: (g * c,))


def divide(x: Tensor, c: float) -> Tensor:
    return record("divide", x.data / c, (x,), lambda g: (g / c,))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    active = x.data > 0
    return record("relu", np.where(active, x.data, 0).astype(x.dtype), (x,),
                  lambda g: (g * active,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape = x.shape
    return record("sum", np.asarray(x.data.sum()), (x,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_over_list(xs: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of same-shaped tensors.

    Accumulated as ``first + sum(x - first) / n`` so that identical inputs
    average to exactly themselves.
    """
    if not xs:
        raise ContractError("mean_over_list needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    first = xs[0]
    for x in xs[1:]:
        if x.shape != first.shape:
            raise DimensionError(f"mean_over_list: shapes {first.shape} and {x.shape} do not agree")
    n = len(xs)
    acc = xs[1].data - first.data
    for x in xs[2:]:
        acc = acc + (x.data - first.data)
    out = first.data + acc / n
    return record("mean", out, tuple(xs), lambda g: [g / n] * n)


# ----------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return record("swapaxes", np.swapaxes(x.data, a, b), (x,),
                  lambda g: (np.swapaxes(g, a, b),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(x, -1, -2)


def concat_lastdim(xs: Sequence[Tensor]) -> Tensor:
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(
                f"concat_lastdim: shapes {xs[0].shape} and {x.shape} differ outside the last dim")
    widths = np.cumsum([x.shape[-1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=-1)
    return record("concat", out, tuple(xs), lambda g: np.split(g, widths, axis=-1))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (gt,)

    return record("embedding", table.data[ids], (table,), backward)


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., ] = x[..., idx[...]]``: one entry per row of the last axis."""
    idx = np.asarray(idx, dtype=np.int64)[..., None]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return record("take", np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward)


# ----------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record("matmul", ad @ bd, (a, b), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting each row's max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return record("softmax", y, (x,),
                  lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(y)
    return record("log_softmax", y, (x,),
                  lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {x.shape} with gain {gain.shape} and bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", xhat * gd + bias.data, (x, gain, bias), backward)


# ----------------------------------------------------------------------------
# randomness


@dataclass
class RngStream:
    """Counter-based uniform stream: the draw at ``counter`` depends on nothing else.

    Backed by the Philox bijection keyed with ``seed``.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ContractError(f"seed must fit in 64 bits, got {self.seed}")

    def generator(self, counter: int) -> np.random.Generator:
        if not 0 <= counter < 2**64:
            raise ContractError(f"counter must fit in 64 bits, got {counter}")
        return np.random.Generator(np.random.Philox(key=self.seed, counter=counter))

    def uniform_at(self, counter: int) -> float:
        """Uniform draw in [0, 1) at a fixed position."""
        return float(self.generator(counter).random())

    def draw(self) -> float:
        u = self.uniform_at(self.counter)
        self.counter += 1
        return u


# ----------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckResult:
    max_error: float
    worst: Optional[tuple] = None
    nonfinite: list = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_error


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> GradCheckResult:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    The per-coordinate error is ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    Coordinates where a probe is non-finite are listed in ``nonfinite`` and
    make ``max_error`` infinite.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check runs in binary64")
        t.requires_grad = True
    with Tape() as tape:
        out = f(*inputs)
    grads = tape.backward(out, inputs)

    def probe() -> float:
        try:
            v = float(f(*inputs).data)
        except NonFiniteError:
            return float("nan")
        return v

    result = GradCheckResult(0.0)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        g_ad = grads[t].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = probe()
            flat[i] = orig - h
            fm = probe()
            flat[i] = orig
            coord = (k, np.unravel_index(i, t.shape))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                result.nonfinite.append(coord)
                result.max_error = float("inf")
                continue
            g_fd = (fp - fm) / (2 * h)
            err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_ad[i]), abs(g_fd))
            if err > result.max_error:
                result.max_error = float(err)
                result.worst = coord
    return result
