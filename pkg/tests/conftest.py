import numpy as np
import pytest

from lattle import tensor as T
from lattle.data import Column, Kind, Schema, TabularDataset
from lattle.gftt import GfttConfig, GfttModel, build_feature_vocab
from lattle.minilm import LmConfig, MiniLm


def numeric_grad(f, arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar f() w.r.t. every entry of arr (in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


GRAD_SCALE_FLOOR = 1e-6


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    """Max abs difference over the larger gradient magnitude.

    The floor keeps tensors whose true gradient is identically zero (the key
    bias, by softmax shift invariance) from dividing round-off by round-off.
    """
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), GRAD_SCALE_FLOOR)
    return float(np.abs(a - n).max() / scale)


def gradient_errors(loss_fn, params: dict, h: float = 1e-4) -> dict:
    """Per-parameter max relative error of analytic vs central-difference gradients."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    T.backward(loss)
    analytic = {n: p.grad.copy() for n, p in params.items()}
    with T.no_grad():
        return {n: relative_error(analytic[n], numeric_grad(lambda: loss_fn().item(), p.data, h))
                for n, p in params.items()}


def tiny_schema(n_num=2, n_cat=1, prefix="t_f", n_classes=2) -> Schema:
    cols = [Column.of(f"{prefix}{i}", Kind.NUMERIC) for i in range(n_num)]
    cols += [Column.of(f"{prefix}{n_num + i}", Kind.CATEGORICAL) for i in range(n_cat)]
    return Schema(tuple(cols), "label", tuple(str(k) for k in range(n_classes)))


def tiny_dataset(n=12, seed=0, n_num=2, n_cat=1, n_classes=2, prefix="t_f") -> TabularDataset:
    rng = np.random.default_rng(seed)
    schema = tiny_schema(n_num, n_cat, prefix, n_classes)
    cols = {}
    for c in schema.columns:
        if c.kind is Kind.NUMERIC:
            cols[c.name] = rng.normal(size=n)
        else:
            cols[c.name] = np.array([f"v{k}" for k in rng.integers(0, 3, n)], dtype=object)
    labels = np.arange(n) % n_classes
    return TabularDataset(schema, cols, labels.astype(np.int64))


@pytest.fixture
def tiny_lm():
    cfg = LmConfig(vocab_size=11, n_classes=2, n_layers=2, n_heads=2, d_model=8, ffn_hidden=16,
                   max_len=4, dropout=0.0)
    return MiniLm(cfg, seed=3, dtype=np.float64).eval()


@pytest.fixture
def tiny_gftt():
    ds = tiny_dataset(6)
    cfg = GfttConfig(n_layers=2, n_heads=2, d_model=8, ffn_hidden=16, dropout=0.0)
    return GfttModel(cfg, ds.schema, build_feature_vocab(ds), seed=5, dtype=np.float64).eval(), ds


def pair_count_auc(scores, positive) -> float:
    """O(B^2) AUC: fraction of (pos, neg) pairs ranked correctly, ties counting half."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def pair_count_macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Binary case on column 1; otherwise unweighted one-vs-rest mean over present classes."""
    if scores.shape[1] == 2:
        return pair_count_auc(scores[:, 1], labels == 1)
    per_class = [pair_count_auc(scores[:, c], labels == c) for c in np.unique(labels)]
    return sum(per_class) / len(per_class)


def random_auc_instance(rng: np.random.Generator):
    """Scores [B, C] and labels with at least two classes present; ties are common."""
    b = int(rng.integers(2, 51))
    c = int(rng.choice([2, 2, 3, 4, 5]))
    labels = rng.integers(0, c, size=b)
    while len(np.unique(labels)) < 2:
        labels = rng.integers(0, c, size=b)
    if rng.random() < 0.5:
        scores = rng.integers(0, 4, size=(b, c)).astype(np.float64)    # heavy ties
    else:
        scores = rng.random((b, c))
    return scores, labels


# -- acceptance report -------------------------------------------------------------

_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    number, title = dict(report.user_properties).get("criterion", (None, None))
    if number is None or report.when == "teardown":
        return
    if report.when == "setup" and report.passed:
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if report.failed and not detail:
            detail = report.longreprtext.strip().splitlines()[-1] if report.longreprtext else ""
        _CRITERIA[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}: {title}" + (f" | {detail}" if detail else ""))


@pytest.fixture
def criterion(request, record_property):
    """Tag the test with its acceptance criterion; call ``report(detail)`` to attach the evidence."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    record_property("criterion", (number, title))

    def report(detail: str) -> None:
        record_property("detail", detail)
        print(f"criterion {number}: {title} | {detail}")

    return report
