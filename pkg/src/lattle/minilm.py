"""Decoder-only mini language model with a gated tabular classification head.

Forward path for classification: token + learned positional embeddings,
causal pre-norm blocks, final layer norm, a projection into the head's
width, a learned CLS vector prepended, non-causal gated layers, and a
linear classifier reading the CLS position.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, LabelIndexError, LayerError
from .layers import (AttentionLayerWeights, AttentionTrace, causal_mask, check_heads,
                     decoder_block, gated_layer, init_layer, key_padding_mask)
from .tensor import Tensor
from .tokenizer import PAD_ID


@dataclass
class LmConfig:
    vocab_size: int
    n_classes: int = 2
    n_layers: int = 6
    n_heads: int = 4
    d_model: int = 64
    ffn_hidden: int = 256
    max_len: int = 1024
    dropout: float = 0.1
    head_d_model: int | None = None
    head_layers: int = 1
    head_heads: int | None = None
    full_finetune: bool = False

    def __post_init__(self):
        if self.head_d_model is None:
            self.head_d_model = self.d_model
        if self.head_heads is None:
            self.head_heads = self.n_heads

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.vocab_size < 1 or self.max_len < 1 or self.n_classes < 2:
            raise ConfigError("vocab_size, max_len must be positive and n_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        check_heads(self.d_model, self.n_heads)
        check_heads(self.head_d_model, self.head_heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "LmConfig":
        return cls(**d)


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns ids [B, T] and a validity mask [B, T]."""
    if not seqs:
        raise ValueError("empty batch")
    width = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    valid = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = True
    valid[:, 0] = True   # an empty sequence still yields one (PAD) position
    return ids, valid


class MiniLm:
    kind = "mini-lm"

    def __init__(self, config: LmConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = False
        self.vocab = None      # serialization vocabulary, carried into checkpoints
        self.schema = None     # source schema, likewise
        self.rng = np.random.default_rng(seed)
        init = np.random.default_rng(seed)
        c = config
        std = 0.02
        self.tok_emb = T.parameter(init.normal(0, std, (c.vocab_size, c.d_model)), dtype=dtype)
        self.pos_emb = T.parameter(init.normal(0, std / 2, (c.max_len, c.d_model)), dtype=dtype)
        self.layers = [init_layer(c.d_model, c.ffn_hidden, init, gated=False, dtype=dtype, std=std)
                       for _ in range(c.n_layers)]
        self.ln_f_g = T.parameter(np.ones(c.d_model), dtype=dtype)
        self.ln_f_b = T.parameter(np.zeros(c.d_model), dtype=dtype)
        bound = 1.0 / np.sqrt(c.d_model)
        self.proj_w = T.parameter(init.uniform(-bound, bound, (c.d_model, c.head_d_model)), dtype=dtype)
        self.proj_b = T.parameter(np.zeros(c.head_d_model), dtype=dtype)
        self.head_cls = T.parameter(init.normal(0, 1.0, c.head_d_model), dtype=dtype)
        self.head = [init_layer(c.head_d_model, c.ffn_hidden, init, gated=True, dtype=dtype)
                     for _ in range(c.head_layers)]
        hb = 1.0 / np.sqrt(c.head_d_model)
        self.clf_w = T.parameter(init.uniform(-hb, hb, (c.head_d_model, c.n_classes)), dtype=dtype)
        self.clf_b = T.parameter(np.zeros(c.n_classes), dtype=dtype)
        for name, p in self.parameters().items():
            p.name = name
        self.apply_freezing()

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.named().items()})
        out.update({"ln_f_g": self.ln_f_g, "ln_f_b": self.ln_f_b,
                    "proj_w": self.proj_w, "proj_b": self.proj_b, "head_cls": self.head_cls})
        for i, layer in enumerate(self.head):
            out.update({f"head.{i}.{k}": v for k, v in layer.named().items()})
        out.update({"clf_w": self.clf_w, "clf_b": self.clf_b})
        return out

    def apply_freezing(self) -> None:
        """Freeze embeddings and every block below the uppermost one,
        unless the config asks for full fine-tuning."""
        top = f"layers.{self.config.n_layers - 1}."
        for name, p in self.parameters().items():
            lower = name in ("tok_emb", "pos_emb") or (name.startswith("layers.") and not name.startswith(top))
            p.frozen = lower and not self.config.full_finetune

    def train(self) -> "MiniLm":
        self.training = True
        return self

    def eval(self) -> "MiniLm":
        self.training = False
        return self

    # -- forward --------------------------------------------------------------
    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.shape[1] > self.config.max_len:
            raise ConfigError(f"sequence length {ids.shape[1]} exceeds max_len {self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise LabelIndexError(f"token id outside vocabulary of {self.config.vocab_size}")

    @property
    def n_frozen_blocks(self) -> int:
        """Leading decoder blocks that stay fixed during source fine-tuning."""
        return 0 if self.config.full_finetune else self.config.n_layers - 1

    def _block_training(self, i: int) -> bool:
        # frozen blocks act as a fixed feature extractor: no dropout inside
        return self.training and i >= self.n_frozen_blocks

    def _embed(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        t = ids.shape[1]
        x = T.add(T.embedding(self.tok_emb, ids), T.take(self.pos_emb, slice(0, t)))
        return T.dropout(x, self.config.dropout, self.rng, self.training and self.config.full_finetune)

    def _blocks(self, x: Tensor, start: int, stop: int, trace=None, states=None) -> Tensor:
        c = self.config
        mask = causal_mask(x.shape[1], self.dtype)
        for i in range(start, stop):
            x = decoder_block(x, self.layers[i], c.n_heads, mask, dropout=c.dropout, rng=self.rng,
                              training=self._block_training(i), trace=trace)
            if states is not None:
                states.append(x)
        return x

    def hidden_states(self, ids: np.ndarray, trace: AttentionTrace | None = None,
                      all_layers: bool = False):
        """Causal decoder output [B, T, d] after the final layer norm."""
        states: list[Tensor] = []
        x = self._blocks(self._embed(ids), 0, self.config.n_layers, trace, states)
        out = T.layer_norm(x, self.ln_f_g, self.ln_f_b)
        return (out, states) if all_layers else out

    def frozen_features(self, ids: np.ndarray) -> np.ndarray:
        """Output of the embeddings and the frozen blocks, without a graph.

        Frozen blocks run without dropout, so these features are a pure
        function of ``ids`` and can be computed once per dataset.
        """
        with T.no_grad():
            return self._blocks(self._embed(ids), 0, self.n_frozen_blocks).data

    def logits(self, ids: np.ndarray, valid: np.ndarray, trace: AttentionTrace | None = None) -> Tensor:
        return self._head(self.hidden_states(ids, trace), valid, trace)

    def logits_from_features(self, features: np.ndarray, valid: np.ndarray) -> Tensor:
        """Logits from :meth:`frozen_features` output; equals :meth:`logits`."""
        x = self._blocks(Tensor(features), self.n_frozen_blocks, self.config.n_layers)
        return self._head(T.layer_norm(x, self.ln_f_g, self.ln_f_b), valid, None)

    def _head(self, h: Tensor, valid: np.ndarray, trace) -> Tensor:
        c = self.config
        h = T.linear(h, self.proj_w, self.proj_b)
        b = h.shape[0]
        cls = T.add(Tensor(np.zeros((b, 1, c.head_d_model), dtype=self.dtype)), self.head_cls)
        x = T.concat([cls, h], axis=1)
        full_valid = np.concatenate([np.ones((b, 1), dtype=bool), valid], axis=1)
        mask = key_padding_mask(full_valid, self.dtype)
        for layer in self.head:
            x = gated_layer(x, layer, c.head_heads, mask, dropout=c.dropout, rng=self.rng,
                            training=self.training, trace=trace)
        z_cls = T.take(x, (slice(None), 0, slice(None)))
        return T.linear(z_cls, self.clf_w, self.clf_b)

    def forward_classify(self, seqs: Sequence[Sequence[int]]) -> Tensor:
        ids, valid = pad_batch(seqs)
        return self.logits(ids, valid)

    def autoregressive_loss(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        """Next-token cross-entropy with the output layer tied to ``tok_emb``."""
        h = self.hidden_states(ids)
        b, t, d = h.shape
        if t < 2:
            raise ConfigError("autoregressive loss needs sequences of length >= 2")
        pred = T.reshape(T.take(h, (slice(None), slice(0, t - 1), slice(None))), (b * (t - 1), d))
        vocab_logits = T.matmul(pred, T.transpose(self.tok_emb))
        target = ids[:, 1:].reshape(-1)
        weights = valid[:, 1:].reshape(-1).astype(self.dtype)
        return T.cross_entropy(vocab_logits, target, weights)

    # -- extraction -------------------------------------------------------------
    def extract_attention(self, layer_indices: Sequence[int]) -> list[AttentionLayerWeights]:
        return extract_attention(self, layer_indices)


def extract_attention(lm: MiniLm, layer_indices: Sequence[int]) -> list[AttentionLayerWeights]:
    """Deep copies of the requested decoder layers (index n_layers-1 is the top)."""
    n = len(lm.layers)
    out = []
    for idx in layer_indices:
        if not 0 <= idx < n:
            raise LayerError(f"layer index {idx} out of range for a {n}-layer model")
        out.append(lm.layers[idx].copy())
    return out
