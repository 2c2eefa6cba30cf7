"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op appends a :class:`Node` to an implicit, globally
ordered tape (a monotone sequence counter).  :func:`backward` collects the
nodes reachable from a scalar loss, orders them by creation (which is a
topological order, since operands always exist before their consumers) and
walks that order in reverse, visiting each node once.

Arrays are stored as contiguous row-major numpy buffers with an explicit
shape; ops never write into their operands.  Any op whose forward or
backward result contains NaN/Inf raises :class:`NonFiniteError` naming the op.
"""

from __future__ import annotations

import contextlib
import math
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "attention",
    "reshape",
    "transpose",
    "softmax",
    "layer_norm",
    "gelu",
    "relu",
    "embedding",
    "cross_entropy",
    "tsum",
    "mean",
    "dropout",
]

_SEQ = itertools.count()
_STATE = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def _check_finite(op: str, arr: np.ndarray, where: str = "forward") -> None:
    # a non-finite sum is necessary for a non-finite entry; confirm before raising
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in {where} pass")


class Tensor:
    """A float64 array that may participate in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

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


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_SEQ))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, out)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        result._node = Node(op, inputs, result, backward_fn)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tape:
    """The ordered list of nodes contributing to one scalar output."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [out._node] if out._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, out: Tensor) -> None:
        leaves = self._run(out, check=False)
        # a non-finite gradient anywhere reaches some leaf; replay to name the op
        if any(not math.isfinite(t.grad.sum()) for t in leaves):
            self._run(out, check=True, accumulate=False)
            raise NonFiniteError("backward: non-finite gradient in a leaf")

    def _run(self, out: Tensor, check: bool, accumulate: bool = True) -> list[Tensor]:
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            if accumulate:
                node.output.grad = g
            for t, gi in zip(node.inputs, node.backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                if check:
                    _check_finite(node.op, gi, "backward")
                if t._node is None:
                    if accumulate:
                        t.grad = gi.copy() if t.grad is None else t.grad + gi
                        leaves[id(t)] = t
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
        if out._node is None and out.requires_grad and accumulate:
            out.grad = np.ones_like(out.data) if out.grad is None else out.grad + 1.0
        return list(leaves.values())


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every grad-requiring tensor that feeds ``loss``.

    Leaf gradients accumulate across calls; zero them between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    Tape.from_output(loss).backward(loss)


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    # non-finite results surface as NonFiniteError, so numpy's warnings are noise
    def grads(g):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape))

    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = ad / bd
    return _record("div", out, (a, b), grads)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU; smooth, so finite differences behave."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _record("gelu", out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# --- shape ----------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # weight-style product: fold leading axes into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _record("matmul", (a2 @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]), (a, b), bw2)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record("matmul", np.matmul(ad, bd), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x [..., k], w [k, n], b [n] as one tape node."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    out += b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        # a ones-vector product sums rows faster than a reduction along axis 0
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2, np.ones(g2.shape[0]) @ g2

    return _record("linear", out, (x, w, b), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None, num_heads: int) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` heads as one tape node.

    q is [B, Tq, D]; k, v are [B, Tk, D]; ``mask`` is an additive constant
    broadcastable to [B, H, Tq, Tk].  Returns [B, Tq, D].
    """
    b, tq, d = q.shape
    tk = k.shape[1]
    if k.shape != (b, tk, d) or v.shape != k.shape or d % num_heads:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}, heads {num_heads}")
    dh = d // num_heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(b, tq, num_heads, dh).transpose(0, 2, 1, 3)
    kh = k.data.reshape(b, tk, num_heads, dh).transpose(0, 2, 1, 3)
    vh = v.data.reshape(b, tk, num_heads, dh).transpose(0, 2, 1, 3)
    p = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    p *= scale
    if mask is not None:
        p += mask
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    ctx = np.matmul(p, vh)
    out = np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(b, tq, d)

    def bw(g):
        gc = g.reshape(b, tq, num_heads, dh).transpose(0, 2, 1, 3)
        gp = np.matmul(gc, vh.transpose(0, 1, 3, 2))
        gv = np.matmul(p.transpose(0, 1, 3, 2), gc)
        gs = gp - np.einsum("bhqk,bhqk->bhq", gp, p)[..., None]
        gs *= p
        gs *= scale
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)

        def merge(x, t):
            return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, t, d)

        return merge(gq, tq), merge(gk, tk), merge(gv, tk)

    return _record("attention", out, (q, k, v), bw)


# --- reductions -----------------------------------------------------------


def tsum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# --- normalisation / probabilities -----------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise IndexError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", y, (x,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last axis {d}")
    inv_d = 1.0 / d
    xhat = x.data - x.data.sum(axis=-1, keepdims=True) * inv_d
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    gd = gain.data
    out = xhat * gd
    out += bias.data

    def bw(g):
        gx_hat = g * gd
        proj = np.einsum("...i,...i->...", gx_hat, xhat)[..., None] * inv_d
        gx = xhat * proj
        np.subtract(gx_hat, gx, out=gx)
        gx -= gx_hat.sum(axis=-1, keepdims=True) * inv_d
        gx *= inv
        g2 = g.reshape(-1, d)
        return gx, np.einsum("ij,ij->j", g2, xhat.reshape(-1, d)), g2.sum(axis=0)

    return _record("layer_norm", out, (x, gain, bias), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding: id out of range [0, {v})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is [T, V]; positions whose target equals ``ignore_id`` are
    excluded from the mean.  An all-ignored batch gives loss 0.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [T, V], got {logits.shape}")
    t, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != t:
        raise ShapeError(f"cross_entropy: {t} logit rows vs {targets.shape[0]} targets")
    keep = np.ones(t, dtype=bool) if ignore_id is None else targets != ignore_id
    bad = keep & ((targets < 0) | (targets >= v))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(targets[bad][0])} outside [0, {v})")
    n = int(keep.sum())
    x = logits.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, targets[rows]].sum() / n if n else 0.0

    def bw(g):
        if not n:
            return (np.zeros_like(x),)
        p = np.exp(logp)
        p[rows, targets[rows]] -= 1.0
        p[~keep] = 0.0
        return (p * (float(g) / n),)

    return _record("cross_entropy", np.asarray(loss, dtype=np.float64), (logits,), bw)
