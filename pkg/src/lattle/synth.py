"""Seeded synthetic source/target tables with disjoint feature names.

Numeric features come from class clusters laid out along one random
direction of a latent space.  Noise along that direction is clipped so the
classes occupy disjoint slabs (gap = 0.2 * margin): the labels are linearly
separable by construction.  Latent coordinates are then shifted, scaled
and rounded per feature so that the raw CSV looks like ordinary data.
Categorical features follow class-conditional level distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Column, Kind, Schema, TabularDataset
from .errors import ConfigError


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int
    n_numeric: int
    n_categorical: int
    n_classes: int = 2
    margin: float = 3.0
    n_levels: int = 4
    decimals: int = 1
    prefix: str = "f"

    @property
    def n_features(self) -> int:
        return self.n_numeric + self.n_categorical

    def validate(self) -> None:
        if self.n_features < 1:
            raise ConfigError(f"{self.prefix}: need at least one feature")
        if self.n_samples < 10 or self.n_classes < 2 or self.margin <= 0:
            raise ConfigError(f"{self.prefix}: need >= 10 samples, >= 2 classes and a positive margin")


DEFAULT_SOURCE = SyntheticSpec(2000, 6, 2, prefix="s_f")
DEFAULT_TARGET = SyntheticSpec(500, 4, 2, prefix="t_f")


def generate(spec: SyntheticSpec, rng: np.random.Generator) -> TabularDataset:
    spec.validate()
    n, c = spec.n_samples, spec.n_classes
    labels = rng.permutation(np.arange(n) % c)

    cols: list[Column] = []
    data: dict[str, np.ndarray] = {}
    if spec.n_numeric:
        p = spec.n_numeric
        direction = rng.normal(size=p)
        direction /= np.linalg.norm(direction)
        centre = spec.margin * (labels - (c - 1) / 2.0)
        along = np.clip(rng.normal(size=n), -0.4 * spec.margin, 0.4 * spec.margin)
        latent = rng.normal(size=(n, p))
        latent -= np.outer(latent @ direction, direction)          # orthogonal part
        latent += np.outer(centre + along, direction)
        loc = rng.uniform(-2.0, 2.0, size=p)
        scale = rng.uniform(0.5, 2.0, size=p)
        raw = np.round(loc + scale * latent, spec.decimals)
        for j in range(p):
            col = Column.of(f"{spec.prefix}{j}", Kind.NUMERIC)
            cols.append(col)
            data[col.name] = raw[:, j] + 0.0                        # drop negative zeros
    levels = np.array([f"v{k}" for k in range(spec.n_levels)], dtype=object)
    for j in range(spec.n_categorical):
        logits = 0.5 * spec.margin * rng.normal(size=(c, spec.n_levels))
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        u = rng.random(n)
        picks = (u[:, None] > np.cumsum(probs[labels], axis=1)).sum(axis=1)
        picks = np.minimum(picks, spec.n_levels - 1)
        col = Column.of(f"{spec.prefix}{spec.n_numeric + j}", Kind.CATEGORICAL)
        cols.append(col)
        data[col.name] = levels[picks]

    schema = Schema(tuple(cols), "label", tuple(str(k) for k in range(c)))
    return TabularDataset(schema, data, labels.astype(np.int64))


def gen_synthetic_pair(seed: int, source: SyntheticSpec = DEFAULT_SOURCE,
                       target: SyntheticSpec = DEFAULT_TARGET) -> tuple[TabularDataset, TabularDataset]:
    """Source and target tables from independent child streams of ``seed``."""
    if source.prefix == target.prefix:
        target = replace(target, prefix="t_" + target.prefix)
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return generate(source, src_rng), generate(target, tgt_rng)
