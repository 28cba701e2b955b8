"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a C-contiguous NumPy array.  Differentiable operations
record their parents and a backward closure; ``backward`` walks the
recorded graph once in reverse topological order.

Parameters are ordinary tensors with ``requires_grad=True``.  The
``frozen`` flag only matters to optimizers: a frozen parameter still
receives its gradient so that upstream tensors train through it.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, LabelIndexError, NumericError

_GRAD_ENABLED = True

DEFAULT_DTYPE = np.float32


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "name",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, frozen: bool = False,
                 name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = frozen
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    # -- basic properties -------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.frozen:
            flags.append("frozen")
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{', ' if flags else ''}{', '.join(flags)})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph traversal --------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  The graph is
    released afterwards, so a second call without a new forward pass raises
    ``GraphError``.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward called twice on the same graph; run a new forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaves own a private buffer: callers may modify p.grad in place
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        # interior nodes may share the buffer; backward never writes into g
        node.grad = g if node.grad is None else node.grad + g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        c = float(b)

        def back_scalar(g):
            return (g * c,)

        return _make(a.data * a.data.dtype.type(c), (a,), back_scalar)
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def back(g):
        return (g * (out > 0),)

    return _make(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form: overflow-free for any input
    half = x.dtype.type(0.5)
    y = np.tanh(x.data * half)
    y *= half
    y += half

    def back(g):
        return (g * y * (1 - y),)

    return _make(y, (x,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (GPT-2 flavour)."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    y = 0.5 * xd * (1 + t)

    def back(g):
        d_inner = _GELU_C * (1 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * d_inner),)

    return _make(y.astype(xd.dtype, copy=False), (x,), back)


def _keep_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean keep mask with P(keep) = 1 - p, p resolved to 1/65536 steps."""
    n = int(np.prod(shape))
    raw = rng.bit_generator.random_raw((n + 3) // 4).view(np.uint16)[:n]
    return (raw >= int(round(p * 65536))).reshape(shape)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = _keep_mask(x.shape, p, rng) * x.dtype.type(1.0 / (1.0 - p))

    def back(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), back)


# -- shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def back(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), back)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x: Tensor, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(count))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batched broadcasting over leading dimensions."""
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if b.ndim == 2 and a.ndim > 2:
        # (..., k) @ (k, n): one GEMM over the flattened leading dims
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[1])

        def back_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), back_flat)

    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` over the last axis, fused into one graph node."""
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(*xd.shape[:-1], wd.shape[1])

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out, (x, w) if b is None else (x, w, b), back)


def linear_many(x: Tensor, pairs: Sequence[tuple[Tensor, Tensor]]) -> list[Tensor]:
    """Several affine maps of the same input computed with one GEMM.

    Returns one output per ``(w, b)`` pair.  The graph holds a single node
    whose output is the concatenation, split by cheap slicing ops.
    """
    ws = [w for w, _ in pairs]
    bs = [b for _, b in pairs]
    for w in ws:
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    xd = x.data
    x2 = xd.reshape(-1, xd.shape[-1])
    widths = [w.shape[1] for w in ws]
    bounds = np.cumsum(widths)[:-1]
    wcat = np.concatenate([w.data for w in ws], axis=1)
    out = x2 @ wcat + np.concatenate([b.data for b in bs])

    def back(g):
        gx = (g @ wcat.T).reshape(xd.shape) if x.requires_grad else None
        gws = np.split(x2.T @ g, bounds, axis=1)
        gbs = np.split(g.sum(axis=0), bounds)
        grads = [gx]
        for w, b, gw, gb in zip(ws, bs, gws, gbs):
            grads.append(gw if w.requires_grad else None)
            grads.append(gb if b.requires_grad else None)
        return tuple(grads)

    parents = [x]
    for w, b in pairs:
        parents.extend((w, b))
    joint = _make(out, parents, back)
    lead = xd.shape[:-1]
    outs, start = [], 0
    for width in widths:
        outs.append(_slice_cols(joint, start, start + width, lead))
        start += width
    return outs


def _slice_cols(x: Tensor, start: int, stop: int, lead) -> Tensor:
    """Columns ``start:stop`` of a 2-D tensor, reshaped to ``lead + (width,)``."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g.reshape(-1, stop - start)
        return (full,)

    return _make(x.data[:, start:stop].reshape(*lead, stop - start), (x,), back)


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None = None, *,
              dropout: float = 0.0, rng: np.random.Generator | None = None, training: bool = False,
              probs_sink: list | None = None) -> Tensor:
    """Multi-head scaled dot-product attention core on [B, T, d] projections.

    Per head h: alpha = softmax(Q_h K_h^T / sqrt(d_k) + mask), Z_h = alpha V_h;
    the heads are concatenated back to [B, T, d].  ``mask`` is additive and
    broadcastable to [B, h, T, T].  Dropout applies to alpha.
    """
    b, t, d = q.shape
    if k.shape != (b, t, d) or v.shape != (b, t, d):
        raise DimensionError(f"attention shapes differ: {q.shape}, {k.shape}, {v.shape}")
    dk = d // n_heads
    scale = 1.0 / math.sqrt(dk)

    def heads(a):
        return a.reshape(b, t, n_heads, dk).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2))
    scores *= scores.dtype.type(scale)
    if mask is not None:
        scores += mask
    if np.isnan(scores).any():
        raise NumericError("attention scores contain NaN")
    scores -= scores.max(axis=-1, keepdims=True)
    alpha = np.exp(scores, out=scores)
    alpha /= alpha.sum(axis=-1, keepdims=True)
    if probs_sink is not None:
        probs_sink.append(alpha.copy())
    keep = None
    if training and dropout > 0.0:
        if rng is None:
            raise ValueError("dropout in training mode needs a generator")
        keep = _keep_mask(alpha.shape, dropout, rng) * alpha.dtype.type(1.0 / (1.0 - dropout))
        used = alpha * keep
    else:
        used = alpha
    z = np.matmul(used, vh).transpose(0, 2, 1, 3).reshape(b, t, d)

    def back(g):
        gz = g.reshape(b, t, n_heads, dk).transpose(0, 2, 1, 3)
        g_used = np.matmul(gz, vh.transpose(0, 1, 3, 2))
        gv = np.matmul(used.transpose(0, 1, 3, 2), gz) if v.requires_grad else None
        g_alpha = g_used if keep is None else g_used * keep
        gs = alpha * (g_alpha - (g_alpha * alpha).sum(axis=-1, keepdims=True))
        gs *= gs.dtype.type(scale)
        gq = np.matmul(gs, kh) if q.requires_grad else None
        gk = np.matmul(gs.transpose(0, 1, 3, 2), qh) if k.requires_grad else None

        def merge(a):
            return None if a is None else a.transpose(0, 2, 1, 3).reshape(b, t, d)

        return merge(gq), merge(gk), merge(gv)

    return _make(z, (q, k, v), back)


# -- fused normalisation / probability ops -------------------------------------

def softmax_last_dim(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=reduce_axes) if gamma.requires_grad else None
        gb = g.sum(axis=reduce_axes) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), back)


def log_softmax(x: Tensor) -> np.ndarray:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``weights`` optionally masks rows (0 excludes a row); the mean is then
    taken over the included rows.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    if n == 0:
        raise DimensionError("cross_entropy needs at least one row")
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise LabelIndexError(f"label {bad} out of range for {c} classes")
    w = np.ones(n, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype)
    total = float(w.sum())
    if total <= 0:
        raise DimensionError("cross_entropy weights exclude every row")
    logp = log_softmax(logits)
    rows = np.arange(n)
    nll = -logp[rows, labels]
    loss = np.asarray((nll * w).sum() / total, dtype=logits.dtype)

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (w[:, None] * (g / total)),)

    return _make(loss, (logits,), back)


# -- embedding lookups ---------------------------------------------------------

_DENSE_SCATTER_LIMIT = 1 << 22


def _scatter_rows(n_rows: int, ids: np.ndarray, weights: np.ndarray | None, g: np.ndarray,
                  dtype) -> np.ndarray:
    """sum over slots s of weights[s] * g[bag(s)] into row ids[s].

    ``ids``/``weights`` have shape [M, K] (K slots per bag), ``g`` is [M, d].
    Small problems go through a dense [rows x M] GEMM; large ones fall back
    to ``np.add.at``.
    """
    m, k = ids.shape
    w = np.ones(ids.shape, dtype=dtype) if weights is None else weights
    if n_rows * m <= _DENSE_SCATTER_LIMIT:
        sel = np.zeros((n_rows, m), dtype=dtype)
        np.add.at(sel, (ids, np.broadcast_to(np.arange(m)[:, None], ids.shape)), w)
        return sel @ g
    full = np.zeros((n_rows, g.shape[1]), dtype=dtype)
    contrib = w[..., None] * g[:, None, :]
    np.add.at(full, ids.reshape(-1), contrib.reshape(-1, g.shape[1]))
    return full


def _check_ids(ids: np.ndarray, v: int) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise LabelIndexError(f"token id out of range for table of {v} rows")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(ids, table.shape[0])
    shape, dtype = table.shape, table.dtype

    def back(g):
        return (_scatter_rows(shape[0], ids.reshape(-1, 1), None, g.reshape(-1, shape[1]), dtype),)

    return _make(table.data[ids], (table,), back)


def embedding_bag(table: Tensor, ids, weights) -> Tensor:
    """out[..., :] = sum_k weights[..., k] * table[ids[..., k]].

    ``weights`` are constants; padding slots carry weight 0.
    """
    ids = np.asarray(ids, dtype=np.int64)
    w = np.asarray(weights, dtype=table.dtype)
    if ids.shape != w.shape:
        raise DimensionError(f"embedding_bag ids {ids.shape} vs weights {w.shape}")
    _check_ids(ids, table.shape[0])
    gathered = table.data[ids]                       # (..., K, d)
    out = (w[..., None] * gathered).sum(axis=-2)     # (..., d)
    shape, dtype = table.shape, table.dtype
    k = ids.shape[-1]

    def back(g):
        return (_scatter_rows(shape[0], ids.reshape(-1, k), w.reshape(-1, k),
                              g.reshape(-1, shape[1]), dtype),)

    return _make(out.astype(dtype, copy=False), (table,), back)


# -- helpers ------------------------------------------------------------------

def collect(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
