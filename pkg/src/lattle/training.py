"""Training loop, learning-rate schedule and the two fine-tuning phases."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingError
from .gftt import GfttModel
from .minilm import MiniLm, pad_batch
from .optim import AdamW
from .tensor import Tensor

log = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    weight_decay: float = 0.01
    dropout: float = 0.1
    warmup_ratio: float = 0.1
    max_epochs: int = 200
    seed: int = 0

    def validate(self) -> None:
        # a zero learning rate is accepted: it is the documented no-op run
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must lie in (0, 1), got {self.warmup_ratio}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")

    def to_dict(self) -> dict:
        return asdict(self)


SOURCE_DEFAULTS = TrainConfig(learning_rate=3e-4, batch_size=16, weight_decay=0.01,
                              dropout=0.1, warmup_ratio=0.1, max_epochs=200)
TARGET_DEFAULTS = TrainConfig(learning_rate=3e-4, batch_size=64, weight_decay=1e-4,
                              dropout=0.1, warmup_ratio=0.1, max_epochs=150)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def lr_schedule(step: int, total_steps: int, warmup_ratio: float, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ConfigError("lr_schedule needs total_steps >= 1")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, warmup_ratio)
    if step < warm:
        return peak_lr * step / warm
    return peak_lr * (total_steps - step) / max(1, total_steps - warm)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    curve: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    steps: int = 0

    def write_curve(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for r in self.curve:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r}\n")


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in params.items()}


def restore(params: dict[str, Tensor], state: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        p.data = state[name].copy()


def fit(model, batch_loss: Callable[[np.ndarray], Tensor], val_loss: Callable[[], float],
        n_train: int, config: TrainConfig, *, trainable: Sequence[Tensor] | None = None) -> TrainResult:
    """Mini-batch AdamW with a warmup/decay schedule and best-validation selection.

    ``batch_loss(idx)`` builds the loss graph for the training rows ``idx``
    (the model is in training mode); ``val_loss()`` is called in eval mode
    after every epoch.  On return the model holds the parameters of the
    epoch with the lowest validation loss.
    """
    config.validate()
    if n_train < 1:
        raise ConfigError("no training rows")
    params = model.parameters()
    opt = AdamW(list(params.values()) if trainable is None else list(trainable),
                lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(n_train / config.batch_size)
    total = per_epoch * config.max_epochs
    result = TrainResult()
    best_state = snapshot(params)
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = batch_loss(idx)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss {value}", step)
            T.backward(loss)
            opt.step(lr_schedule(step, total, config.warmup_ratio, config.learning_rate))
            opt.zero_grad()
            loss_sum += value * len(idx)
            step += 1
        model.eval()
        with T.no_grad():
            v = float(val_loss())
        if not math.isfinite(v):
            raise TrainingError(f"non-finite validation loss {v}", step)
        result.curve.append(EpochRecord(epoch, loss_sum / n_train, v))
        if v < result.best_val_loss:
            result.best_val_loss, result.best_epoch = v, epoch
            best_state = snapshot(params)
        log.debug("epoch %d train %.5f val %.5f", epoch, loss_sum / n_train, v)
    restore(params, best_state)
    model.eval()
    result.steps = step
    return result


def _chunked_mean_loss(logit_fn: Callable[[np.ndarray], Tensor], labels: np.ndarray) -> float:
    n = len(labels)
    total = 0.0
    for start in range(0, n, EVAL_CHUNK):
        idx = np.arange(start, min(n, start + EVAL_CHUNK))
        total += T.cross_entropy(logit_fn(idx), labels[idx]).item() * len(idx)
    return total / n


def predict_chunked(logit_fn: Callable[[np.ndarray], Tensor], n: int) -> np.ndarray:
    """Logits for rows 0..n-1, evaluated in chunks without a graph."""
    out = []
    with T.no_grad():
        for start in range(0, n, EVAL_CHUNK):
            out.append(logit_fn(np.arange(start, min(n, start + EVAL_CHUNK))).data)
    return np.concatenate(out, axis=0)


# -- source phase -------------------------------------------------------------

class LmBatches:
    """Token sequences of one fold, padded once; slices are trimmed per batch.

    When the LM keeps its lower blocks frozen, their output is computed
    once here, so a training step only runs the trainable top of the model.
    """

    def __init__(self, lm: MiniLm, seqs: Sequence[Sequence[int]], labels: np.ndarray):
        self.lm = lm
        self.ids, self.valid = pad_batch(seqs)
        self.lengths = self.valid.sum(axis=1)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.features = None
        if lm.n_frozen_blocks > 0:
            self.features = np.concatenate(
                [lm.frozen_features(self.ids[s:s + EVAL_CHUNK]) for s in range(0, len(self.ids), EVAL_CHUNK)])

    def __len__(self) -> int:
        return len(self.labels)

    def logits(self, idx: np.ndarray) -> Tensor:
        width = int(self.lengths[idx].max())
        valid = self.valid[idx, :width]
        if self.features is not None:
            return self.lm.logits_from_features(self.features[idx, :width], valid)
        return self.lm.logits(self.ids[idx, :width], valid)

    def loss(self, idx: np.ndarray) -> Tensor:
        return T.cross_entropy(self.logits(idx), self.labels[idx])

    def mean_loss(self) -> float:
        return _chunked_mean_loss(self.logits, self.labels)

    def predict(self) -> np.ndarray:
        return predict_chunked(self.logits, len(self))


def autoregressive_warmup(lm: MiniLm, seqs: Sequence[Sequence[int]], epochs: int,
                          config: TrainConfig) -> list[float]:
    """Optional next-token pre-phase over every decoder parameter."""
    if epochs <= 0:
        return []
    params = [p for name, p in lm.parameters().items()
              if name in ("tok_emb", "pos_emb", "ln_f_g", "ln_f_b") or name.startswith("layers.")]
    saved = {id(p): p.frozen for p in params}
    for p in params:
        p.frozen = False
    opt = AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    ids, valid = pad_batch(seqs)
    losses = []
    lm.train()
    try:
        for _ in range(epochs):
            total, order = 0.0, rng.permutation(len(ids))
            for start in range(0, len(ids), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss = lm.autoregressive_loss(ids[idx], valid[idx])
                if not math.isfinite(loss.item()):
                    raise TrainingError("non-finite autoregressive loss", start)
                T.backward(loss)
                opt.step()
                for p in lm.parameters().values():
                    p.grad = None
                total += loss.item() * len(idx)
            losses.append(total / len(ids))
    finally:
        for p in params:
            p.frozen = saved[id(p)]
        lm.eval()
    return losses


def finetune_source(lm: MiniLm, train_seqs, train_labels, val_seqs, val_labels,
                    config: TrainConfig = SOURCE_DEFAULTS, *, ar_epochs: int = 0) -> TrainResult:
    """Classification fine-tuning of the LM on serialized source rows."""
    lm.config = replace(lm.config, dropout=config.dropout)
    if ar_epochs:
        autoregressive_warmup(lm, train_seqs, ar_epochs, config)
    train = LmBatches(lm, train_seqs, train_labels)
    val = LmBatches(lm, val_seqs, val_labels)
    return fit(lm, train.loss, val.mean_loss, len(train), config)


# -- target phase ---------------------------------------------------------------

class GfttBatches:
    """Pre-encoded feature ids/weights of one normalized fold."""

    def __init__(self, model: GfttModel, ds):
        self.model = model
        self.ids, self.weights = model.encode(ds)
        self.labels = np.asarray(ds.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def logits(self, idx: np.ndarray) -> Tensor:
        return self.model.logits(self.ids[idx], self.weights[idx])

    def loss(self, idx: np.ndarray) -> Tensor:
        return T.cross_entropy(self.logits(idx), self.labels[idx])

    def mean_loss(self) -> float:
        return _chunked_mean_loss(self.logits, self.labels)

    def predict(self) -> np.ndarray:
        return predict_chunked(self.logits, len(self))


def finetune_target(model: GfttModel, train_ds, val_ds, config: TrainConfig = TARGET_DEFAULTS) -> TrainResult:
    """Fine-tune the gFTT; frozen tensors keep their values throughout."""
    model.config = replace(model.config, dropout=config.dropout)
    train = GfttBatches(model, train_ds)
    val = GfttBatches(model, val_ds)
    return fit(model, train.loss, val.mean_loss, len(train), config)
