"""Seeded random search over the gFTT fine-tuning hyperparameters."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigError, LattleError, SearchError
from .training import TARGET_DEFAULTS, TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        v = math.exp(rng.uniform(math.log(self.low), math.log(self.high)))
        # exp(log(x)) can land one ulp outside the interval
        return min(max(v, self.low), self.high)

    def contains(self, v: float) -> bool:
        return self.low <= v <= self.high


@dataclass(frozen=True)
class Choice:
    values: tuple

    def sample(self, rng: np.random.Generator):
        return self.values[int(rng.integers(len(self.values)))]

    def contains(self, v) -> bool:
        return v in self.values


@dataclass(frozen=True)
class HyperparamSpace:
    learning_rate: LogUniform = LogUniform(1e-5, 3e-4)
    batch_size: Choice = Choice((32, 64, 96, 128))
    weight_decay: LogUniform = LogUniform(1e-6, 1e-2)
    dropout: Choice = Choice((0.0, 0.1, 0.2, 0.3, 0.4))
    warmup_ratio: Choice = Choice((0.01, 0.05, 0.1))

    NAMES = ("learning_rate", "batch_size", "weight_decay", "dropout", "warmup_ratio")

    def sample(self, rng: np.random.Generator, base: TrainConfig = TARGET_DEFAULTS) -> TrainConfig:
        values = {name: getattr(self, name).sample(rng) for name in self.NAMES}
        return replace(base, **values)

    def contains(self, cfg: TrainConfig) -> bool:
        return all(getattr(self, name).contains(getattr(cfg, name)) for name in self.NAMES)


@dataclass
class Trial:
    index: int
    config: TrainConfig
    val_loss: float
    error: str | None = None


@dataclass
class SearchResult:
    best: TrainConfig
    best_val_loss: float
    trials: list[Trial] = field(default_factory=list)


def random_search(objective: Callable[[TrainConfig], float], space: HyperparamSpace = HyperparamSpace(),
                  n_trials: int = 100, seed: int = 0, base: TrainConfig = TARGET_DEFAULTS) -> SearchResult:
    """Evaluate ``n_trials`` sampled configs; keep the one with the lowest validation loss.

    A trial whose objective raises a library error or returns a non-finite
    loss is logged as failed.  Ties keep the earliest trial.
    """
    if n_trials < 1:
        raise ConfigError("random search needs n_trials >= 1")
    rng = np.random.default_rng(seed)
    trials: list[Trial] = []
    for i in range(n_trials):
        cfg = space.sample(rng, base)
        try:
            loss = float(objective(cfg))
            err = None if math.isfinite(loss) else f"non-finite validation loss {loss}"
        except LattleError as exc:
            loss, err = math.inf, f"{type(exc).__name__}: {exc}"
        trials.append(Trial(i, cfg, loss, err))
        log.info("trial %d val_loss %s %s", i, loss, err or "")
    ok = [t for t in trials if t.error is None]
    if not ok:
        raise SearchError(f"all {n_trials} trials failed")
    best = min(ok, key=lambda t: (t.val_loss, t.index))
    return SearchResult(best.config, best.val_loss, trials)
