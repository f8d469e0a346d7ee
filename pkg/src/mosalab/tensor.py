"""Dense arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient buffer. Every
operation in this module records a closure that maps the output gradient to
input gradients; :meth:`Tensor.backward` replays them in reverse topological
order. Leading batch axes are supported by every op, so a ``[T, h]`` routine
also runs on ``[B, T, h]`` inputs.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

# Additive stand-in for -inf in attention masks. exp() of anything this
# negative underflows to exactly 0.0 in both float32 and float64.
SENTINEL = -1e9

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_mac_counter = contextvars.ContextVar("mac_counter", default=None)


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; ``backward(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@dataclass
class MacCounter:
    """Tally of multiply-accumulates performed by :func:`matmul` and of
    elementwise products performed by :func:`mul` inside a :func:`count_macs` block."""

    matmul: int = 0
    elementwise: int = 0
    events: list = field(default_factory=list)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _mac_counter.set(counter)
    try:
        yield counter
    finally:
        _mac_counter.reset(token)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    counter = _mac_counter.get()
    if counter is not None:
        counter.elementwise += out.size
        counter.events.append(("mul", a.shape, b.shape, out.size))
    return make_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op(x.data * c, (x,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp() never overflows.
    z = x.data
    e = np.exp(-np.abs(z))
    y = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)
    return make_op(y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    z = x.data
    u = _GELU_C * (z + 0.044715 * (z * z * z))
    t = np.tanh(u)
    y = 0.5 * z * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * (z * z))
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * du),)

    return make_op(y, (x,), backward)


# shape ops and reductions

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})"
        )
    out = np.matmul(a.data, b.data)
    _count_matmul(a.shape, b.shape, out.size * a.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch axes into one product
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_op(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    return make_op(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Left-to-right sum; the fixed order keeps results reproducible."""
    if not xs:
        raise ValueError("add_n of an empty sequence")
    out = xs[0]
    for x in xs[1:]:
        out = add(out, x)
    return out


# attention primitives

def masked_softmax_rows(s: Tensor, mask) -> Tensor:
    """Softmax over the last axis of ``s + mask``.

    ``mask`` holds 0 for allowed entries and :data:`SENTINEL` for forbidden
    ones. Forbidden entries come out as exact zeros.
    """
    s = as_tensor(s)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(s.dtype, copy=False)
    allowed = m > SENTINEL / 2
    if not np.all(allowed.any(axis=-1)):
        raise ValueError("masked_softmax_rows: a row has no allowed entry (invalid selection mask)")
    y = s.data + m
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return make_op(y, (s,), backward)


def topk(values, k: int) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` entries along the last axis.

    Ties go to the lower index. Indices come back sorted ascending by
    position, scores reordered to match. Only the scores are differentiable.
    """
    v = as_tensor(values)
    n = v.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk: k={k} outside [1, {n}]")
    idx = topk_indices(v.data, k)
    return take_last(v, idx), idx


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort of the negated values keeps lower indices first among ties
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick entries of ``x`` along its last axis (duplicates allowed)."""
    out = np.take_along_axis(x.data, idx, axis=-1)

    def backward(g):
        gx = np.zeros(x.shape, dtype=x.dtype)  # C-contiguous so the reshape below is a view
        _scatter_add_last(gx, idx, g)
        return (gx,)

    return make_op(out, (x,), backward)


def _scatter_add_last(dst: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    flat_dst = dst.reshape(-1, dst.shape[-1])
    flat_idx = idx.reshape(-1, idx.shape[-1])
    flat_src = src.reshape(-1, src.shape[-1])
    rows = np.arange(flat_dst.shape[0])[:, None]
    np.add.at(flat_dst, (rows, flat_idx), flat_src)


def _check_rows(idx: np.ndarray, n: int) -> None:
    if idx.shape[-1] == 0:
        raise ValueError("empty index list")
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError(f"row index out of range [0, {n})")
    if idx.shape[-1] > 1 and np.any(np.diff(idx, axis=-1) <= 0):
        raise ValueError("row indices must be strictly increasing (no duplicates)")


def gather_rows(x: Tensor, idx) -> Tensor:
    """``x[..., idx, :]`` for strictly increasing ``idx`` of shape ``[..., k]``.

    Leading axes of ``x`` and ``idx`` broadcast against each other, so one
    ``[B, 1, T, h]`` input can feed ``[B, H, k]`` per-head selections.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    T = x.shape[-2]
    _check_rows(idx, T)
    batch = np.broadcast_shapes(x.shape[:-2], idx.shape[:-1])
    idx = np.broadcast_to(idx, batch + idx.shape[-1:])
    xb = np.broadcast_to(x.data, batch + x.shape[-2:])
    out = np.take_along_axis(xb, idx[..., None], axis=-2)

    def backward(g):
        gx = np.zeros(batch + x.shape[-2:], dtype=g.dtype)
        np.put_along_axis(gx, idx[..., None], g, axis=-2)
        return (_unbroadcast(gx, x.shape),)

    return make_op(out, (x,), backward)


def scatter_rows(y: Tensor, idx, T: int) -> Tensor:
    """Place rows of ``y`` at positions ``idx`` of a zero ``[..., T, h]`` array."""
    y = as_tensor(y)
    idx = np.asarray(idx, dtype=np.int64)
    _check_rows(idx, T)
    if idx.ndim < y.ndim - 1:
        idx = np.broadcast_to(idx, y.shape[:-2] + idx.shape[-1:])
    if idx.shape[-1] != y.shape[-2]:
        raise ShapeError(f"scatter_rows: {idx.shape[-1]} indices for {y.shape[-2]} rows")
    out = np.zeros(y.shape[:-2] + (T, y.shape[-1]), dtype=y.dtype)
    np.put_along_axis(out, idx[..., None], y.data, axis=-2)

    def backward(g):
        return (np.take_along_axis(g, idx[..., None], axis=-2),)

    return make_op(out, (y,), backward)


def _count_matmul(a_shape, b_shape, macs: int) -> None:
    counter = _mac_counter.get()
    if counter is not None:
        counter.matmul += macs
        counter.events.append(("matmul", a_shape, b_shape, macs))


def head_project(x: Tensor, w: Tensor) -> Tensor:
    """Per-head projection ``[..., T, h] x [H, h, d] -> [..., H, T, d]`` as one product."""
    x, w = as_tensor(x), as_tensor(w)
    H, h, d = w.shape
    if x.shape[-1] != h:
        raise ShapeError(f"head_project: {x.shape} against weights {w.shape}")
    lead, T = x.shape[:-2], x.shape[-2]
    x2 = x.data.reshape(-1, h)
    wcat = w.data.transpose(1, 0, 2).reshape(h, H * d)
    y = (x2 @ wcat).reshape(lead + (T, H, d))
    _count_matmul(x.shape, w.shape, y.size * h)
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    out = np.ascontiguousarray(y.transpose(perm))

    def backward(g):
        g2 = g.transpose(perm).reshape(-1, H * d)
        gx = (g2 @ wcat.T).reshape(x.shape) if x.requires_grad else None
        gw = (x2.T @ g2).reshape(h, H, d).transpose(1, 0, 2) if w.requires_grad else None
        return gx, gw

    return make_op(out, (x, w), backward)


def head_merge(a: Tensor, w: Tensor) -> Tensor:
    """Sum of per-head output projections ``sum_H a[..., H, :, :] @ w[H]`` -> ``[..., T, h]``."""
    a, w = as_tensor(a), as_tensor(w)
    H, d, h = w.shape
    if a.shape[-3] != H or a.shape[-1] != d:
        raise ShapeError(f"head_merge: {a.shape} against weights {w.shape}")
    lead, T = a.shape[:-3], a.shape[-2]
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    a2 = a.data.transpose(perm).reshape(-1, H * d)
    wcat = w.data.reshape(H * d, h)
    out = (a2 @ wcat).reshape(lead + (T, h))
    _count_matmul(a.shape, w.shape, a.data.size * h)

    def backward(g):
        g2 = g.reshape(-1, h)
        ga = None
        if a.requires_grad:
            ga = (g2 @ wcat.T).reshape(lead + (T, H, d)).transpose(perm)
        gw = (a2.T @ g2).reshape(H, d, h) if w.requires_grad else None
        return ga, gw

    return make_op(out, (a, w), backward)


def _flat_rows(idx: np.ndarray, T: int) -> np.ndarray:
    # row numbers into a [prod(lead) * T, h] view for idx of shape [*lead, H, k]
    n = int(np.prod(idx.shape[:-2], dtype=np.int64))
    base = (np.arange(n) * T).reshape(idx.shape[:-2] + (1, 1))
    return idx + base


def _sum_into_rows(T: int, rows: np.ndarray, y: np.ndarray, lead) -> np.ndarray:
    h = y.shape[-1]
    out = np.zeros((int(np.prod(lead, dtype=np.int64)) * T, h), dtype=y.dtype)
    # indices are unique within a head, so one fancy-index add per head is exact
    for j in range(rows.shape[-2]):
        out[rows[..., j, :].reshape(-1)] += y[..., j, :, :].reshape(-1, h)
    return out.reshape(tuple(lead) + (T, h))


def gather_heads(x: Tensor, idx) -> Tensor:
    """Per-head row selection ``[..., T, h]`` with ``idx [..., H, k]`` -> ``[..., H, k, h]``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    lead, T, h = x.shape[:-2], x.shape[-2], x.shape[-1]
    _check_rows(idx, T)
    if idx.shape[:-2] != lead:
        raise ShapeError(f"gather_heads: indices {idx.shape} for input {x.shape}")
    rows = _flat_rows(idx, T)
    out = x.data.reshape(-1, h)[rows]

    def backward(g):
        return (_sum_into_rows(T, rows, g, lead),)

    return make_op(out, (x,), backward)


def scatter_heads(y: Tensor, idx, T: int) -> Tensor:
    """Inverse of :func:`gather_heads`: place each head's rows at ``idx`` and sum over heads."""
    y = as_tensor(y)
    idx = np.asarray(idx, dtype=np.int64)
    _check_rows(idx, T)
    if idx.shape != y.shape[:-1]:
        raise ShapeError(f"scatter_heads: indices {idx.shape} for rows {y.shape}")
    lead, h = y.shape[:-3], y.shape[-1]
    rows = _flat_rows(idx, T)
    out = _sum_into_rows(T, rows, y.data, lead)

    def backward(g):
        return (g.reshape(-1, h)[rows],)

    return make_op(out, (y,), backward)


# model plumbing

def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` looked up by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if np.any(ids < 0) or np.any(ids >= V):
        raise ValueError(f"token id outside [0, {V})")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_op(out, (table,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return make_op(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if np.any(targets < 0) or np.any(targets >= V):
        raise ValueError(f"target id outside [0, {V})")
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    n = targets.size
    loss = -picked.sum() / n

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (g / n),)

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# verification

def finite_diff_check(f: Callable, x, eps: float = 1e-5, max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f(x)`` must return a scalar Tensor. ``x`` is a Tensor or a sequence of
    them; each is perturbed in place and restored. The error per entry is
    ``|g_fd - g_ad| / max(1, |g_ad|)``. With ``max_entries`` only that many
    randomly chosen entries per tensor are probed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    f(x).backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, g in zip(xs, analytic):
            flat = t.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = rng.choice(flat.size, size=max_entries, replace=False)
            gflat = g.reshape(-1)
            for i in entries:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).item()
                flat[i] = orig - eps
                fm = f(x).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                worst = max(worst, abs(num - gflat[i]) / max(1.0, abs(gflat[i])))
    return worst
