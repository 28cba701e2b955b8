"""Tabular datasets: CSV ingestion, schemas, seeded splits, scaling, serialization."""

from __future__ import annotations

import csv
import enum
import math
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DatasetError, DisjointnessError, ParseError

MISSING_MARKERS = frozenset({"", "?", "na", "n/a", "nan", "null"})
MISSING_CATEGORY = "missing"
FOLD_TENTHS = (7, 1, 2)
DEFAULT_SEEDS = tuple(range(10))
STD_FLOOR = 1e-8


class Kind(str, enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


class StratificationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Column:
    name: str       # lowercase key
    kind: Kind
    display: str    # original casing, used when serializing

    @classmethod
    def of(cls, display: str, kind: Kind | str) -> "Column":
        return cls(display.strip().lower(), Kind(kind), display.strip())


@dataclass(frozen=True)
class Schema:
    columns: tuple[Column, ...]
    label_column: str
    classes: tuple[str, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if any(not n for n in names):
            raise DatasetError("empty column name")
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise DatasetError(f"duplicate column names: {', '.join(dupes)}")
        if self.label_column.lower() in names:
            raise DatasetError(f"label column {self.label_column!r} listed as a feature")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def n_features(self) -> int:
        return len(self.columns)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name.lower():
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"columns": [[c.display, c.kind.value] for c in self.columns],
                "label": self.label_column, "classes": list(self.classes)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Schema":
        return cls(tuple(Column.of(n, k) for n, k in d["columns"]), d["label"], tuple(d["classes"]))

    def write_sidecar(self, path) -> None:
        lines = [f"{c.display},{c.kind.value}" for c in self.columns]
        lines.append(f"label,{self.label_column}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class SchemaHints:
    kinds: dict[str, Kind] = field(default_factory=dict)
    label: str | None = None

    @classmethod
    def read(cls, path) -> "SchemaHints":
        kinds, label = {}, None
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            name, sep, kind = line.partition(",")
            name, kind = name.strip(), kind.strip()
            if not sep:
                raise ParseError(f"schema sidecar line {lineno}: expected name,kind")
            if name.lower() == "label" and kind.lower() not in {k.value for k in Kind}:
                label = kind
                continue
            try:
                kinds[name.lower()] = Kind(kind.lower())
            except ValueError:
                raise ParseError(f"schema sidecar line {lineno}: unknown kind {kind!r}") from None
        return cls(kinds, label)


@dataclass
class TabularDataset:
    """Column-major storage.

    Numeric columns are float64 arrays with NaN for missing cells;
    categorical columns are object arrays of strings with None for missing.
    """
    schema: Schema
    columns: dict[str, np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        for c in self.schema.columns:
            if c.name not in self.columns or len(self.columns[c.name]) != n:
                raise DatasetError(f"column {c.name!r} missing or wrong length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.schema.n_classes):
            raise DatasetError("label index outside the schema classes")

    def __len__(self) -> int:
        return len(self.labels)

    def row(self, i: int) -> dict:
        out = {}
        for c in self.schema.columns:
            v = self.columns[c.name][i]
            if c.kind is Kind.NUMERIC:
                out[c.name] = None if np.isnan(v) else float(v)
            else:
                out[c.name] = v
        return out

    def rows(self) -> Iterable[dict]:
        return (self.row(i) for i in range(len(self)))

    def subset(self, indices) -> "TabularDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return TabularDataset(self.schema, {k: v[idx] for k, v in self.columns.items()}, self.labels[idx])

    def numeric_matrix(self) -> np.ndarray:
        names = [c.name for c in self.schema.columns if c.kind is Kind.NUMERIC]
        if not names:
            return np.zeros((len(self), 0))
        return np.column_stack([self.columns[n] for n in names])


# -- CSV ------------------------------------------------------------------------

def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_MARKERS


def _parse_float(cell: str) -> float | None:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def _class_order(values: Iterable[str]) -> tuple[str, ...]:
    uniq = set(values)
    if all(_parse_float(v) is not None for v in uniq):
        return tuple(sorted(uniq, key=lambda v: (float(v), v)))
    return tuple(sorted(uniq))


def load_csv(path, schema_hints: SchemaHints | str | Path | None = None,
             label_column: str | None = None) -> TabularDataset:
    """Read a UTF-8 CSV with a header row into a typed dataset.

    A column is numeric iff every non-missing cell parses as a finite
    float.  A sidecar ``<path>.schema`` is picked up automatically when no
    hints are given.
    """
    path = Path(path)
    if schema_hints is None and Path(str(path) + ".schema").exists():
        schema_hints = Path(str(path) + ".schema")
    if isinstance(schema_hints, (str, Path)):
        schema_hints = SchemaHints.read(schema_hints)
    hints = schema_hints or SchemaHints()
    label_key = (label_column or hints.label or "label").strip().lower()

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise ParseError("missing header row", row=1)
        header = [h.strip() for h in header]
        lowered = [h.lower() for h in header]
        if label_key not in lowered:
            raise ParseError(f"label column {label_key!r} not in header", row=1)
        records = []
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=reader.line_num)
            records.append((reader.line_num, row))
    if not records:
        raise DatasetError("no rows")

    label_pos = lowered.index(label_key)
    raw_labels = []
    for lineno, row in records:
        cell = row[label_pos].strip()
        if _is_missing(cell):
            raise ParseError("missing label", row=lineno)
        raw_labels.append(cell)
    classes = _class_order(raw_labels)
    class_index = {c: i for i, c in enumerate(classes)}

    columns, data = [], {}
    for pos, display in enumerate(header):
        if pos == label_pos:
            continue
        cells = [row[pos].strip() for _, row in records]
        present = [c for c in cells if not _is_missing(c)]
        kind = hints.kinds.get(display.lower())
        if kind is None:
            kind = Kind.NUMERIC if all(_parse_float(c) is not None for c in present) else Kind.CATEGORICAL
        col = Column.of(display, kind)
        if kind is Kind.NUMERIC:
            values = np.empty(len(cells))
            for i, c in enumerate(cells):
                if _is_missing(c):
                    values[i] = np.nan
                else:
                    v = _parse_float(c)
                    if v is None:
                        raise ParseError(f"column {display!r}: {c!r} is not numeric", row=records[i][0])
                    values[i] = v
        else:
            values = np.array([None if _is_missing(c) else c for c in cells], dtype=object)
        columns.append(col)
        data[col.name] = values

    schema = Schema(tuple(columns), header[label_pos], classes)
    labels = np.array([class_index[v] for v in raw_labels], dtype=np.int64)
    return TabularDataset(schema, data, labels)


def format_number(v: float) -> str:
    """Shortest round-trip text for a float, without a trailing ``.0``."""
    text = repr(float(v))
    return text[:-2] if text.endswith(".0") else text


def write_csv(ds: TabularDataset, path, write_schema: bool = True) -> None:
    path = Path(path)
    header = [c.display for c in ds.schema.columns] + [ds.schema.label_column]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(ds)):
            out = []
            for c in ds.schema.columns:
                v = ds.columns[c.name][i]
                if c.kind is Kind.NUMERIC:
                    out.append("" if np.isnan(v) else format_number(v))
                else:
                    out.append("" if v is None else v)
            out.append(ds.schema.classes[ds.labels[i]])
            writer.writerow(out)
    if write_schema:
        ds.schema.write_sidecar(str(path) + ".schema")


# -- splits -----------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    seed: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def folds(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _apportion(n: int, tenths=FOLD_TENTHS) -> list[int]:
    """Largest-remainder split of ``n`` into parts proportional to ``tenths``."""
    floors = [n * w // 10 for w in tenths]
    rems = [n * w % 10 for w in tenths]
    short = n - sum(floors)
    for f in sorted(range(len(tenths)), key=lambda f: (-rems[f], f))[:short]:
        floors[f] += 1
    return floors


def _max_flow(cap: np.ndarray, source: int, sink: int) -> np.ndarray:
    """Edmonds-Karp on a dense capacity matrix; returns the flow matrix."""
    n = cap.shape[0]
    flow = np.zeros_like(cap)
    while True:
        parent = [-1] * n
        parent[source] = source
        queue = [source]
        for u in queue:
            for v in range(n):
                if parent[v] == -1 and cap[u, v] - flow[u, v] > 0:
                    parent[v] = u
                    queue.append(v)
        if parent[sink] == -1:
            return flow
        v = sink
        while v != source:
            u = parent[v]
            flow[u, v] += 1
            flow[v, u] -= 1
            v = u


def _controlled_rounding(class_sizes: Sequence[int], fold_totals: Sequence[int]) -> np.ndarray:
    """Integer [C, F] table with row sums = class sizes, column sums = fold totals,
    and every cell the floor or ceiling of its proportional quota."""
    n_c, n_f = len(class_sizes), len(FOLD_TENTHS)
    floor = np.array([[n * w // 10 for w in FOLD_TENTHS] for n in class_sizes], dtype=np.int64)
    frac = np.array([[n * w % 10 for w in FOLD_TENTHS] for n in class_sizes], dtype=np.int64)
    # nodes: 0 = source, 1..C = classes, C+1..C+F = folds, last = sink
    sink = n_c + n_f + 1
    cap = np.zeros((sink + 1, sink + 1), dtype=np.int64)
    for c, n in enumerate(class_sizes):
        cap[0, 1 + c] = n - floor[c].sum()
        for f in range(n_f):
            cap[1 + c, 1 + n_c + f] = 1 if frac[c, f] else 0
    for f in range(n_f):
        cap[1 + n_c + f, sink] = fold_totals[f] - floor[:, f].sum()
    flow = _max_flow(cap, 0, sink)
    if flow[0].sum() != cap[0].sum():
        raise DatasetError("could not balance the stratified split")
    return floor + flow[1:1 + n_c, 1 + n_c:1 + n_c + n_f]


def split(ds: TabularDataset, seed: int) -> SplitAssignment:
    """Seeded, stratified 70/10/20 train/validation/test split."""
    n = len(ds)
    if n < 10:
        raise DatasetError(f"need at least 10 rows to split, got {n}")
    rng = np.random.default_rng(seed)
    totals = _apportion(n)
    counts = np.bincount(ds.labels, minlength=ds.schema.n_classes)
    present = [c for c in range(len(counts)) if counts[c] > 0]
    if any(counts[c] < 3 for c in present):
        warnings.warn("a class has fewer than 3 samples; falling back to an unstratified split",
                      StratificationWarning, stacklevel=2)
        groups = [np.arange(n)]
        table = np.array([totals])
    else:
        groups = [np.flatnonzero(ds.labels == c) for c in present]
        table = _controlled_rounding([len(g) for g in groups], totals)
    folds: list[list[np.ndarray]] = [[], [], []]
    for g, row in zip(groups, table):
        perm = rng.permutation(g)
        bounds = np.cumsum(row)[:-1]
        for f, chunk in enumerate(np.split(perm, bounds)):
            folds[f].append(chunk)
    train, val, test = (np.sort(np.concatenate(parts)) for parts in folds)
    return SplitAssignment(seed, train, val, test)


# -- normalisation ---------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    means: dict[str, float]
    stds: dict[str, float]

    def apply(self, ds: TabularDataset) -> TabularDataset:
        return apply_normalizer(self, ds)


def fit_normalizer(ds: TabularDataset, train_indices) -> Normalizer:
    """Per-column mean/std of numeric features over the training fold only."""
    idx = np.asarray(train_indices, dtype=np.int64)
    means, stds = {}, {}
    for c in ds.schema.columns:
        if c.kind is not Kind.NUMERIC:
            continue
        vals = ds.columns[c.name][idx]
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            means[c.name], stds[c.name] = 0.0, 1.0
            continue
        means[c.name] = float(vals.mean())
        stds[c.name] = max(float(vals.std()), STD_FLOOR)
    return Normalizer(means, stds)


def apply_normalizer(norm: Normalizer, ds: TabularDataset) -> TabularDataset:
    """z-score numerics with training statistics; impute missing cells."""
    cols = {}
    for c in ds.schema.columns:
        v = ds.columns[c.name]
        if c.kind is Kind.NUMERIC:
            z = (v - norm.means[c.name]) / norm.stds[c.name]
            cols[c.name] = np.where(np.isnan(z), 0.0, z)
        else:
            cols[c.name] = np.array([MISSING_CATEGORY if x is None else x for x in v], dtype=object)
    return TabularDataset(ds.schema, cols, ds.labels.copy())


# -- serialization ----------------------------------------------------------------

def _render(value, kind: Kind) -> str:
    if value is None or (kind is Kind.NUMERIC and isinstance(value, float) and math.isnan(value)):
        return MISSING_CATEGORY
    if kind is Kind.NUMERIC:
        text = format(float(value), ".6g")
        return "0" if text == "-0" else text
    return str(value)


def serialize_row(row: Mapping, schema: Schema) -> str:
    """Render a raw row as ``"<Name> is <value>."`` sentences in schema order."""
    parts = []
    for c in schema.columns:
        value = row.get(c.name, row.get(c.display))
        parts.append(f"{c.display} is {_render(value, c.kind)}.")
    return " ".join(parts)


def serialize(ds: TabularDataset) -> list[str]:
    return [serialize_row(r, ds.schema) for r in ds.rows()]


_SENTENCE = re.compile(r"(.+?) is (.+?)\.(?: |$)")


def parse_serialized(text: str) -> list[tuple[str, str]]:
    """Inverse of ``serialize_row`` for the fixed sentence grammar."""
    return [(m.group(1), m.group(2)) for m in _SENTENCE.finditer(text)]


def check_disjoint(source: Schema, target: Schema) -> None:
    shared = set(source.names) & set(target.names)
    if shared:
        raise DisjointnessError(shared)
