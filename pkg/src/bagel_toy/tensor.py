"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations a pre-norm transformer needs are provided. Each op
records its parents and a closure that maps the output gradient to
parent gradients; ``Tensor.backward`` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, LayoutError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior buffers are not needed once propagated
                node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    tracked = _grad_enabled and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data, op=op)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), op=op)
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(2.0 * a.data * g)

    return _make(a.data * a.data, (a,), bw, "square")


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accum(g * (s * (1.0 + a.data * (1.0 - s))))

    return _make(a.data * s, (a,), bw, "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        a._accum(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du))

    return _make(0.5 * x * (1.0 + th), (a,), bw, "gelu")


# -- reductions and shape ----------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        a._accum(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        a._accum(np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def index(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accum(full)

    return _make(a.data[idx], (a,), bw, "index")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, bounds, axis=axis)):
            if p.requires_grad:
                p._accum(gp)

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        a._accum(full)

    return _make(a.data[rows], (a,), bw, "take_rows")


def scatter_rows(parts: Sequence[Tensor], rows: Sequence[np.ndarray], n: int) -> Tensor:
    """Inverse of ``take_rows`` over a partition of ``range(n)``."""
    parts = [as_tensor(p) for p in parts]
    if len(parts) == 1 and len(rows[0]) == n and np.array_equal(rows[0], np.arange(n)):
        return parts[0]
    out = np.empty((n,) + parts[0].shape[1:], dtype=DTYPE)
    for p, r in zip(parts, rows):
        out[r] = p.data

    def bw(g):
        for p, r in zip(parts, rows):
            if p.requires_grad:
                p._accum(g[r])

    return _make(out, parts, bw, "scatter_rows")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum(full)

    return _make(table.data[ids], (table,), bw, "embedding")


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation and activations ----------------------------------------

def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * weight`` over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1] or x.shape[-1] == 0:
        raise DimensionError(f"rms_norm weight {weight.shape} does not match input {x.shape}")
    d = x.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(ms + eps)
    inv = np.where(np.isfinite(inv), inv, 0.0)
    xhat = x.data * inv
    out = xhat * weight.data

    def bw(g):
        if weight.requires_grad:
            weight._accum(_unbroadcast(g * xhat, weight.shape))
        if x.requires_grad:
            gh = g * weight.data
            x._accum(inv * (gh - xhat * np.sum(gh * xhat, axis=-1, keepdims=True) / d))

    return _make(out, (x, weight), bw, "rms_norm")


def swiglu(x: Tensor) -> Tensor:
    """``silu(gate) * value`` where ``gate, value`` are the two halves of the last axis."""
    if x.shape[-1] % 2:
        raise DimensionError(f"swiglu needs an even last extent, got {x.shape[-1]}")
    h = x.shape[-1] // 2
    a, b = x.data[..., :h], x.data[..., h:]
    s = 1.0 / (1.0 + np.exp(-a))
    sa = a * s

    def bw(g):
        gx = np.empty_like(x.data)
        gx[..., :h] = g * b * (s * (1.0 + a * (1.0 - s)))
        gx[..., h:] = g * sa
        x._accum(gx)

    return _make(sa * b, (x,), bw, "swiglu")


# -- rotary position embedding ------------------------------------------------

def rope_angles(positions: np.ndarray, head_dim: int, base: float = 10000.0) -> np.ndarray:
    """Per-token rotation angles, shape ``(n, head_dim // 2)``.

    The first ``head_dim // 4`` angles come from the row coordinate, the
    rest from the column coordinate; both halves share one frequency ladder.
    """
    if head_dim % 4:
        raise ConfigurationError(f"rope_2d needs head_dim divisible by 4, got {head_dim}")
    positions = np.asarray(positions, dtype=DTYPE).reshape(-1, 2)
    half = head_dim // 2
    inv_freq = base ** (-np.arange(0, half, 2, dtype=DTYPE) / half)
    return np.concatenate([np.outer(positions[:, 0], inv_freq),
                           np.outer(positions[:, 1], inv_freq)], axis=1)


def _rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_2d(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate adjacent pairs of ``x`` (tokens x heads x head_dim) by 2-D positions."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"rope_2d expects tokens x heads x head_dim, got {x.shape}")
    ang = rope_angles(positions, x.shape[-1], base)
    if ang.shape[0] != x.shape[0]:
        raise DimensionError("one (row, col) position per token required")
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]

    def bw(g):
        x._accum(_rotate_pairs(g, cos, -sin))

    return _make(_rotate_pairs(x.data, cos, sin), (x,), bw, "rope_2d")


# -- attention ----------------------------------------------------------------

def _mask_array(mask) -> np.ndarray:
    m = getattr(mask, "permitted", mask)
    return np.asarray(m, dtype=bool)


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax weights ``(heads, nq, nk)`` renormalised over permitted keys."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    s = np.matmul(q.transpose(1, 0, 2), k.transpose(1, 2, 0)) * scale
    s = np.where(mask[None], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=-1, keepdims=True)


def attention_core(q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
    """Scaled dot-product attention restricted to ``mask`` (nq x nk booleans)."""
    m = _mask_array(mask)
    if q.ndim != 3 or k.shape != v.shape or q.shape[1:] != k.shape[1:]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if m.shape != (q.shape[0], k.shape[0]):
        raise DimensionError(f"mask {m.shape} does not match {q.shape[0]} queries x {k.shape[0]} keys")
    if not m.any(axis=1).all():
        raise LayoutError("attention mask has a query row with no permitted key")
    scale = 1.0 / np.sqrt(q.shape[-1])
    p = attention_weights(q.data, k.data, m)
    vh = v.data.transpose(1, 0, 2)
    out = np.matmul(p, vh).transpose(1, 0, 2)

    def bw(g):
        gh = g.transpose(1, 0, 2)
        if v.requires_grad:
            v._accum(np.matmul(p.transpose(0, 2, 1), gh).transpose(1, 0, 2))
        dp = np.matmul(gh, vh.transpose(0, 2, 1))
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            q._accum(np.matmul(ds, k.data.transpose(1, 0, 2)).transpose(1, 0, 2))
        if k.requires_grad:
            k._accum(np.matmul(ds.transpose(0, 2, 1), q.data.transpose(1, 0, 2)).transpose(1, 0, 2))

    return _make(out, (q, k, v), bw, "attention")


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask,
                     q_norm: Tensor | None = None, k_norm: Tensor | None = None,
                     q_positions: np.ndarray | None = None,
                     k_positions: np.ndarray | None = None,
                     eps: float = 1e-6) -> Tensor:
    """QK-normalised attention over ``tokens x heads x head_dim`` inputs.

    Norm weights (length ``head_dim``) are applied to q and k before the
    optional 2-D rotary embedding; logits at forbidden positions never
    enter the softmax.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q_norm is not None:
        q = rms_norm(q, q_norm, eps)
    if k_norm is not None:
        k = rms_norm(k, k_norm, eps)
    if q_positions is not None:
        q = rope_2d(q, q_positions)
    if k_positions is not None:
        k = rope_2d(k, k_positions)
    return attention_core(q, k, v, mask)


# -- losses ----------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token-level cross entropy; ``logits`` is ``(n, vocab)``."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    n = len(targets)
    loss = -logp[np.arange(n), targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        logits._accum(g * p / n)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, as_tensor(target))
    return mean(square(diff))


# -- utilities ---------------------------------------------------------------

def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def numerical_grad(f: Callable[[], float], arr: np.ndarray, coords=None, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. entries of ``arr`` (mutated in place).

    With ``coords`` (an iterable of flat indices) only those entries are
    probed; the result then has one value per coordinate.
    """
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    out = np.asarray(out, dtype=DTYPE)
    return out.reshape(arr.shape) if coords is None else out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=DTYPE).ravel()
    n = np.asarray(numeric, dtype=DTYPE).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
