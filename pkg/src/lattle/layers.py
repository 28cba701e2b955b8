"""Transformer layer weights and the attention/gated-layer forward passes.

Weight matrices are stored input-major (``d_in x d_out``) so a projection
is ``x @ W + b``.  All of ``w_q``, ``w_k``, ``w_v`` are combined ``d x d``
maps; a head is a view of ``d / h`` contiguous output channels.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

ATTENTION_NAMES = ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v")


@dataclass
class AttentionLayerWeights:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w_g: Tensor | None = None
    b_g: Tensor | None = None

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            t = getattr(self, f.name)
            if t is not None:
                out[f.name] = t
        return out

    def copy(self) -> "AttentionLayerWeights":
        """Deep copy: later mutation of the source leaves the copy untouched."""
        clone = copy.copy(self)
        for name, t in self.named().items():
            setattr(clone, name, Tensor(t.data.copy(), requires_grad=t.requires_grad,
                                        frozen=t.frozen, name=t.name))
        return clone


def init_layer(d: int, ffn_hidden: int, rng: np.random.Generator, *, gated: bool,
               dtype=np.float32, std: float | None = None) -> AttentionLayerWeights:
    """Fresh layer weights.

    ``std=None`` draws matrices from U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    otherwise from N(0, std^2) (GPT-2 style).
    """
    def mat(n_in, n_out):
        if std is None:
            bound = 1.0 / math.sqrt(n_in)
            arr = rng.uniform(-bound, bound, size=(n_in, n_out))
        else:
            arr = rng.normal(0.0, std, size=(n_in, n_out))
        return T.parameter(arr, dtype=dtype)

    def vec(n, value=0.0):
        return T.parameter(np.full(n, value), dtype=dtype)

    w = AttentionLayerWeights(
        w_q=mat(d, d), b_q=vec(d), w_k=mat(d, d), b_k=vec(d),
        w_v=mat(d, d), b_v=vec(d), w_o=mat(d, d), b_o=vec(d),
        ln1_g=vec(d, 1.0), ln1_b=vec(d),
        ffn_w1=mat(d, ffn_hidden), ffn_b1=vec(ffn_hidden),
        ffn_w2=mat(ffn_hidden, d), ffn_b2=vec(d),
        ln2_g=vec(d, 1.0), ln2_b=vec(d),
    )
    if gated:
        w.w_g = mat(d, d)
        w.b_g = vec(d)
    return w


def check_heads(d: int, n_heads: int) -> None:
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"d_model={d} is not divisible by n_heads={n_heads}")


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """Additive [T, T] mask: -inf strictly above the diagonal."""
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -np.inf
    return m


def key_padding_mask(valid: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Additive [B, 1, 1, T] mask from a boolean [B, T] validity array."""
    m = np.where(valid, 0.0, -np.inf).astype(dtype)
    return m[:, None, None, :]


@dataclass
class AttentionTrace:
    """Optional sink for attention probabilities (one array per call)."""
    probs: list = field(default_factory=list)


def self_attention(x: Tensor, w: AttentionLayerWeights, n_heads: int,
                   mask: np.ndarray | None = None, *, dropout: float = 0.0,
                   rng: np.random.Generator | None = None, training: bool = False,
                   trace: AttentionTrace | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over x: [B, T, d].

    Per head: alpha = softmax(Q K^T / sqrt(d_k) + mask), Z = alpha V.
    Heads are concatenated and passed through the output projection.
    ``mask`` is additive and broadcastable to [B, h, T, T].
    """
    q, k, v = T.linear_many(x, [(w.w_q, w.b_q), (w.w_k, w.b_k), (w.w_v, w.b_v)])
    return _attend(q, k, v, w, n_heads, mask, dropout, rng, training, trace)


def _attend(q, k, v, w, n_heads, mask, dropout, rng, training, trace) -> Tensor:
    check_heads(q.shape[-1], n_heads)
    if mask is not None:
        mask = np.asarray(mask, dtype=q.dtype)
    z = T.attention(q, k, v, n_heads, mask, dropout=dropout, rng=rng, training=training,
                    probs_sink=None if trace is None else trace.probs)
    return T.linear(z, w.w_o, w.b_o)


def feed_forward(x: Tensor, w: AttentionLayerWeights, activation=T.relu, *, dropout: float = 0.0,
                 rng=None, training: bool = False) -> Tensor:
    h = activation(T.linear(x, w.ffn_w1, w.ffn_b1))
    h = T.dropout(h, dropout, rng, training)
    return T.linear(h, w.ffn_w2, w.ffn_b2)


def decoder_block(x: Tensor, w: AttentionLayerWeights, n_heads: int, mask: np.ndarray, *,
                  dropout: float = 0.0, rng=None, training: bool = False,
                  trace: AttentionTrace | None = None) -> Tensor:
    """Pre-norm causal block: x + Attn(LN(x)), then x + FFN(LN(x)) with GELU."""
    h = T.layer_norm(x, w.ln1_g, w.ln1_b)
    a = self_attention(h, w, n_heads, mask, dropout=dropout, rng=rng, training=training, trace=trace)
    x = T.add(x, T.dropout(a, dropout, rng, training))
    h = T.layer_norm(x, w.ln2_g, w.ln2_b)
    f = feed_forward(h, w, T.gelu, dropout=dropout, rng=rng, training=training)
    return T.add(x, T.dropout(f, dropout, rng, training))


def gated_layer(x: Tensor, w: AttentionLayerWeights, n_heads: int, mask: np.ndarray | None = None, *,
                dropout: float = 0.0, rng=None, training: bool = False,
                trace: AttentionTrace | None = None) -> Tensor:
    """Gated post-norm layer over feature tokens (no causal mask).

    u = MHSA(x); g = sigmoid(x W_g + b_g); y = LN(x + g * u);
    out = LN(y + FFN(y)).  Without gate parameters g is identically 1 and
    the layer is a standard post-norm transformer layer.
    """
    if w.w_g is None:
        u = self_attention(x, w, n_heads, mask, dropout=dropout, rng=rng, training=training, trace=trace)
        u = T.dropout(u, dropout, rng, training)
    else:
        # the gate reads the same input as Q/K/V, so share the GEMM
        q, k, v, gate = T.linear_many(x, [(w.w_q, w.b_q), (w.w_k, w.b_k), (w.w_v, w.b_v),
                                          (w.w_g, w.b_g)])
        u = _attend(q, k, v, w, n_heads, mask, dropout, rng, training, trace)
        u = T.mul(T.sigmoid(gate), T.dropout(u, dropout, rng, training))
    y = T.layer_norm(T.add(x, u), w.ln1_g, w.ln1_b)
    f = feed_forward(y, w, T.relu, dropout=dropout, rng=rng, training=training)
    f = T.dropout(f, dropout, rng, training)
    return T.layer_norm(T.add(y, f), w.ln2_g, w.ln2_b)
