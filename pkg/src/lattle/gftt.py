"""Gated feature-tokenizer transformer for target tables."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import MISSING_CATEGORY, Kind, Schema, TabularDataset
from .errors import ConfigError, FeatureError
from .layers import AttentionLayerWeights, AttentionTrace, check_heads, gated_layer, init_layer
from .tensor import Tensor
from .tokenizer import Vocabulary, build_vocab, split_words


@dataclass
class GfttConfig:
    n_layers: int = 5
    n_heads: int = 8
    d_model: int = 64
    ffn_hidden: int = 256
    dropout: float = 0.1
    gated: bool = True

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("gFTT needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        check_heads(self.d_model, self.n_heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GfttConfig":
        return cls(**d)


def feature_corpus(ds: TabularDataset) -> list[str]:
    """Texts covering every feature name and every ``<name> <value>`` pair."""
    texts = []
    for c in ds.schema.columns:
        texts.append(c.display)
        if c.kind is Kind.CATEGORICAL:
            levels = {v for v in ds.columns[c.name] if v is not None} | {MISSING_CATEGORY}
            texts.extend(f"{c.display} {v}" for v in sorted(levels))
    return texts


def build_feature_vocab(ds: TabularDataset) -> Vocabulary:
    return build_vocab(feature_corpus(ds))


class FeatureEmbedder:
    """Per-feature token embeddings.

    Categorical feature: mean of the token embeddings of ``"<name> <value>"``.
    Numeric feature: mean of the name's token embeddings times the
    (normalized) value, so the embedding is linear in the value.
    """

    def __init__(self, vocab: Vocabulary, d: int, rng: np.random.Generator, dtype=np.float32):
        self.vocab = vocab
        self.table = T.parameter(rng.normal(0.0, 1.0, (len(vocab), d)), dtype=dtype)
        self.cls = T.parameter(rng.normal(0.0, 1.0, d), dtype=dtype)
        self.dtype = np.dtype(dtype)

    @property
    def d_model(self) -> int:
        return self.table.shape[1]

    def _tokens(self, text: str) -> list[int]:
        return [self.vocab.id(t) for t in split_words(text)] or [self.vocab.id("")]

    def encode(self, ds: TabularDataset, schema: Schema | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Token ids and pooling weights, both [N, F, K]."""
        schema = schema or ds.schema
        n, f = len(ds), schema.n_features
        per_feature = []
        for c in schema.columns:
            col = ds.columns[c.name]
            if c.kind is Kind.NUMERIC:
                toks = self._tokens(c.display)
                vals = np.asarray(col, dtype=np.float64)
                ids = np.tile(np.array(toks, dtype=np.int64), (n, 1))
                w = vals[:, None] * np.full((1, len(toks)), 1.0 / len(toks))
            else:
                cache: dict[str, list[int]] = {}
                rows = []
                for v in col:
                    v = MISSING_CATEGORY if v is None else v
                    if v not in cache:
                        cache[v] = self._tokens(f"{c.display} {v}")
                    rows.append(cache[v])
                width = max(len(r) for r in rows)
                ids = np.zeros((n, width), dtype=np.int64)
                w = np.zeros((n, width))
                for i, r in enumerate(rows):
                    ids[i, :len(r)] = r
                    w[i, :len(r)] = 1.0 / len(r)
            per_feature.append((ids, w))
        k = max(ids.shape[1] for ids, _ in per_feature)
        all_ids = np.zeros((n, f, k), dtype=np.int64)
        all_w = np.zeros((n, f, k), dtype=self.dtype)
        for j, (ids, w) in enumerate(per_feature):
            all_ids[:, j, :ids.shape[1]] = ids
            all_w[:, j, :w.shape[1]] = w
        return all_ids, all_w

    def embed_features(self, ids: np.ndarray, weights: np.ndarray) -> Tensor:
        return T.embedding_bag(self.table, ids, weights)

    def assemble(self, ids: np.ndarray, weights: np.ndarray) -> Tensor:
        """[B, F+1, d] input with the CLS vector at position 0."""
        feats = self.embed_features(ids, weights)
        b = feats.shape[0]
        cls = T.add(Tensor(np.zeros((b, 1, self.d_model), dtype=self.dtype)), self.cls)
        return T.concat([cls, feats], axis=1)


def embed_sample(emb: FeatureEmbedder, row: Mapping, schema: Schema) -> Tensor:
    """Input embedding [(F+1), d] of a single normalized row."""
    cols = {}
    for c in schema.columns:
        v = row.get(c.name, row.get(c.display))
        cols[c.name] = np.array([v], dtype=np.float64 if c.kind is Kind.NUMERIC else object)
    one = TabularDataset(schema, cols, np.zeros(1, dtype=np.int64))
    ids, w = emb.encode(one)
    x = emb.assemble(ids, w)
    return T.reshape(x, x.shape[1:])


class GfttModel:
    kind = "gftt"

    def __init__(self, config: GfttConfig, schema: Schema, vocab: Vocabulary, seed: int = 0,
                 dtype=np.float32):
        config.validate()
        self.config = config
        self.schema = schema
        self.dtype = np.dtype(dtype)
        self.training = False
        self.rng = np.random.default_rng(seed)
        init = np.random.default_rng(seed)
        self.embedder = FeatureEmbedder(vocab, config.d_model, init, dtype)
        self.layers: list[AttentionLayerWeights] = [
            init_layer(config.d_model, config.ffn_hidden, init, gated=config.gated, dtype=dtype)
            for _ in range(config.n_layers)]
        bound = 1.0 / np.sqrt(config.d_model)
        self.clf_w = T.parameter(init.uniform(-bound, bound, (config.d_model, schema.n_classes)), dtype=dtype)
        self.clf_b = T.parameter(np.zeros(schema.n_classes), dtype=dtype)
        for name, p in self.parameters().items():
            p.name = name

    @property
    def vocab(self) -> Vocabulary:
        return self.embedder.vocab

    def parameters(self) -> dict[str, Tensor]:
        out = {"emb.table": self.embedder.table, "emb.cls": self.embedder.cls}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.named().items()})
        out.update({"clf_w": self.clf_w, "clf_b": self.clf_b})
        return out

    def train(self) -> "GfttModel":
        self.training = True
        return self

    def eval(self) -> "GfttModel":
        self.training = False
        return self

    def check_schema(self, schema: Schema) -> None:
        """Same feature set and kinds as the model's schema; order may differ."""
        mine = {c.name: c.kind for c in self.schema.columns}
        theirs = {c.name: c.kind for c in schema.columns}
        for name in theirs:
            if name not in mine:
                raise FeatureError(f"unexpected feature column {name!r}")
            if mine[name] is not theirs[name]:
                raise FeatureError(f"feature column {name!r} is {theirs[name].value}, expected {mine[name].value}")
        for name in mine:
            if name not in theirs:
                raise FeatureError(f"missing feature column {name!r}")
        if len(schema.classes) != len(self.schema.classes):
            raise FeatureError(f"{len(schema.classes)} classes, model expects {len(self.schema.classes)}")

    def encode(self, ds: TabularDataset) -> tuple[np.ndarray, np.ndarray]:
        self.check_schema(ds.schema)
        return self.embedder.encode(ds)

    def context(self, ids: np.ndarray, weights: np.ndarray, trace: AttentionTrace | None = None) -> Tensor:
        """Final context vectors Z: [B, F+1, d]."""
        c = self.config
        x = self.embedder.assemble(ids, weights)
        for layer in self.layers:
            x = gated_layer(x, layer, c.n_heads, None, dropout=c.dropout, rng=self.rng,
                            training=self.training, trace=trace)
        return x

    def head(self, z: Tensor) -> Tensor:
        return T.linear(T.take(z, (slice(None), 0, slice(None))), self.clf_w, self.clf_b)

    def logits(self, ids: np.ndarray, weights: np.ndarray, trace: AttentionTrace | None = None) -> Tensor:
        return self.head(self.context(ids, weights, trace))

    def forward_classify(self, ds: TabularDataset) -> Tensor:
        ids, w = self.encode(ds)
        return self.logits(ids, w)
