"""Classification metrics and multi-seed aggregation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import DEFAULT_SEEDS
from .errors import AggregateRunError, MetricError


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(xs)
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + 1 + ends) / 2.0          # mean of positions start+1 .. end
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney U / (n_pos * n_neg) with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative samples")
    if np.isnan(scores).any():
        raise MetricError("scores contain NaN")
    r = midranks(scores)
    u = r[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def compute_auc(scores, labels) -> float:
    """Binary AUC, or macro one-vs-rest AUC over the classes present.

    ``scores`` is [B, C] (per-class probabilities or any monotone
    equivalent); a 1-D array is taken as the positive-class score of a
    binary problem.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) < 2:
        raise MetricError("AUC needs at least two samples")
    present = np.unique(labels)
    if len(present) < 2:
        raise MetricError(f"only class {present[0]} present; AUC undefined")
    if scores.ndim == 1:
        if len(present) > 2:
            raise MetricError("1-D scores given for a multiclass problem")
        return binary_auc(scores, labels == present[-1])
    if scores.shape[0] != len(labels):
        raise MetricError(f"{scores.shape[0]} score rows for {len(labels)} labels")
    if scores.shape[1] == 2:
        return binary_auc(scores[:, 1], labels == 1)
    per_class = [binary_auc(scores[:, c], labels == c) for c in present]
    return sum(per_class) / len(per_class)


def compute_acc(scores, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels).reshape(-1)
    if len(labels) == 0:
        raise MetricError("accuracy needs at least one sample")
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class MetricsRecord:
    seed: int
    auc: float
    acc: float
    best_epoch: int
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class SeedSummary:
    records: list[MetricsRecord]
    mean_auc: float
    std_auc: float
    mean_acc: float
    std_acc: float

    def display(self, metric: str = "auc") -> str:
        mean, std = (self.mean_auc, self.std_auc) if metric == "auc" else (self.mean_acc, self.std_acc)
        return format_mean_std(mean, std)

    def summary_dict(self) -> dict:
        return {"mean_auc": self.mean_auc, "std_auc": self.std_auc,
                "mean_acc": self.mean_acc, "std_acc": self.std_acc}

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")
            fh.write(json.dumps(self.summary_dict()) + "\n")


def format_mean_std(mean: float, std: float) -> str:
    """Table display convention: mean to 3 decimals, std to 2, e.g. ``0.829 (0.04)``."""
    return f"{mean:.3f} ({std:.2f})"


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 0:
        raise MetricError("no values to aggregate")
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return mean, std


def summarize(records: Sequence[MetricsRecord]) -> SeedSummary:
    mean_auc, std_auc = mean_std([r.auc for r in records])
    mean_acc, std_acc = mean_std([r.acc for r in records])
    return SeedSummary(list(records), mean_auc, std_auc, mean_acc, std_acc)


def run_seeds(pipeline: Callable[[int], MetricsRecord], seeds: Iterable[int] = DEFAULT_SEEDS,
              map_fn: Callable | None = None) -> SeedSummary:
    """Run ``pipeline(seed)`` for every seed and aggregate.

    ``map_fn`` (e.g. an executor's ``map``) may run seeds concurrently; it
    must preserve order.  Every seed is attempted; failures are collected
    and reported together.
    """
    seeds = list(seeds)
    mapper = map_fn or map
    outcomes = list(mapper(_Guarded(pipeline), seeds))
    failures = {s: err for s, (ok, err) in zip(seeds, outcomes) if not ok}
    if failures:
        raise AggregateRunError(failures)
    return summarize([rec for ok, rec in outcomes])


class _Guarded:
    """Picklable wrapper turning exceptions into (False, message) results."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, seed):
        start = time.perf_counter()
        try:
            rec = self.fn(seed)
            if rec.wall_time_s is None:
                rec.wall_time_s = time.perf_counter() - start
            _check_record(rec)
        except Exception as exc:          # reported per seed by run_seeds
            return False, f"{type(exc).__name__}: {exc}"
        return True, rec


def _check_record(rec: MetricsRecord) -> None:
    for name in ("auc", "acc"):
        v = getattr(rec, name)
        if not (0.0 <= v <= 1.0) or math.isnan(v):
            raise MetricError(f"{name}={v} outside [0, 1] for seed {rec.seed}")
