"""The three pipeline phases, wired through checkpoint files.

Each phase reads its inputs from disk and writes its outputs to disk, so
the CLI commands and the end-to-end driver share exactly this code.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from . import checkpoint
from .config import ExperimentConfig
from .data import TabularDataset, check_disjoint, fit_normalizer, load_csv, serialize, split
from .errors import ConfigError, DataError, FrozenWeightViolation, LattleError
from .gftt import GfttModel, build_feature_vocab
from .metrics import MetricsRecord, SeedSummary, compute_acc, compute_auc, run_seeds, softmax
from .minilm import MiniLm
from .search import HyperparamSpace, random_search
from .tokenizer import build_vocab
from .training import (GfttBatches, LmBatches, TrainConfig, TrainResult, finetune_source,
                       finetune_target)
from .transplant import (ABLATION_ORDER, FreezeMask, freeze_mask_of, get_strategy, query_names,
                         reference_hashes, transplant, verify_frozen)

log = logging.getLogger(__name__)

LM_CKPT = "lm.ckpt"
INIT_CKPT = "gftt_init.ckpt"
MODEL_CKPT = "model.ckpt"
CURVE_CSV = "curve.csv"
VERIFY_JSON = "verify_frozen.json"
METRICS_JSONL = "metrics.jsonl"
RESOLVED_CONFIG = "resolved_config.txt"


@contextlib.contextmanager
def phase(name: str):
    """Prefix any library or I/O error raised inside with the phase name."""
    try:
        yield
    except LattleError as exc:
        if not str(exc).startswith("["):
            exc.args = (f"[{name}] {exc}",) + exc.args[1:]
        raise
    except OSError as exc:
        raise DataError(f"[{name}] {exc}") from exc


def seed_dir(out_dir, seed: int) -> Path:
    return Path(out_dir) / f"seed_{seed}"


def require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"config does not set {what}")
    return Path(path)


# -- source phase ------------------------------------------------------------------

@dataclass
class SourceRun:
    lm: MiniLm
    result: TrainResult
    train_acc: float
    val_loss: float


def source_sequences(lm_vocab, ds: TabularDataset) -> list[list[int]]:
    return [lm_vocab.encode(t) for t in serialize(ds)]


def source_folds(lm: MiniLm, ds: TabularDataset, seed: int) -> dict[str, LmBatches]:
    """Encoded train/val/test folds of the source table for a trained LM."""
    sp = split(ds, seed)
    seqs = source_sequences(lm.vocab, ds)
    return {name: LmBatches(lm, [seqs[i] for i in idx], ds.labels[idx]) for name, idx in sp.folds().items()}


def pretrain_source(source: TabularDataset, cfg: ExperimentConfig) -> SourceRun:
    sp = split(source, cfg.pretrain_seed)
    texts = serialize(source)
    vocab = build_vocab([texts[i] for i in sp.train], max_sequence_length=cfg.max_len)
    seqs = [vocab.encode(t) for t in texts]
    lm = MiniLm(cfg.lm_config(len(vocab), source.schema.n_classes), seed=cfg.pretrain_seed)
    lm.vocab, lm.schema = vocab, source.schema
    train_seqs = [seqs[i] for i in sp.train]
    result = finetune_source(lm, train_seqs, source.labels[sp.train],
                             [seqs[i] for i in sp.val], source.labels[sp.val],
                             cfg.lm_train(), ar_epochs=cfg.lm_ar_epochs)
    train = LmBatches(lm, train_seqs, source.labels[sp.train])
    train_acc = compute_acc(train.predict(), train.labels)
    log.info("source: best epoch %d, val loss %.5f, train acc %.4f",
             result.best_epoch, result.best_val_loss, train_acc)
    return SourceRun(lm, result, train_acc, result.best_val_loss)


def run_pretrain(cfg: ExperimentConfig, out_path: Path) -> SourceRun:
    with phase("pretrain-source"):
        source = load_csv(require(cfg.source_csv, "source_csv"))
        run = pretrain_source(source, cfg)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.save(run.lm, out_path, seed=cfg.pretrain_seed,
                        extra={"best_epoch": run.result.best_epoch, "val_loss": run.val_loss,
                               "train_acc": run.train_acc, "split_seed": cfg.pretrain_seed})
        run.result.write_curve(out_path.with_name(out_path.stem + "_curve.csv"))
        cfg.write(out_path.with_name(out_path.stem + "_" + RESOLVED_CONFIG))
    return run


# -- transplant phase ----------------------------------------------------------------

def build_gftt(target: TabularDataset, cfg: ExperimentConfig, seed: int) -> GfttModel:
    return GfttModel(cfg.gftt_config(), target.schema, build_feature_vocab(target), seed=seed)


def make_init(lm: MiniLm | None, target: TabularDataset, cfg: ExperimentConfig, strategy_name: str,
              seed: int) -> tuple[GfttModel, FreezeMask, dict[str, str]]:
    """Fresh gFTT with the strategy's transplant applied; returns the LM-side hashes too."""
    strategy = get_strategy(strategy_name)
    model = build_gftt(target, cfg, seed)
    if not strategy.mapping:
        return model, FreezeMask(), {}
    if lm is None:
        raise ConfigError(f"strategy {strategy_name} needs a source LM checkpoint")
    if lm.schema is not None:
        check_disjoint(lm.schema, target.schema)
    mask = transplant(lm, model, strategy)
    return model, mask, reference_hashes(lm, strategy, model.config.n_layers)


def write_init(model: GfttModel, mask: FreezeMask, lm_hashes: dict, strategy_name: str,
               seed: int, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, path, seed=seed,
                    extra={"strategy": strategy_name, "freeze_mask": mask.sorted(), "lm_hashes": lm_hashes})


def run_transplant(cfg: ExperimentConfig, lm_path: Path, strategy_name: str, out_path: Path) -> FreezeMask:
    with phase("transplant"):
        lm = checkpoint.load(lm_path, MiniLm.kind) if strategy_name != "none" else None
        target = load_csv(require(cfg.target_csv, "target_csv"))
        model, mask, lm_hashes = make_init(lm, target, cfg, strategy_name, cfg.gftt_init_seed)
        write_init(model, mask, lm_hashes, strategy_name, cfg.gftt_init_seed, out_path)
    return mask


# -- target phase ----------------------------------------------------------------------

def evaluate(model: GfttModel, ds: TabularDataset) -> tuple[float, float]:
    probs = softmax(GfttBatches(model, ds).predict())
    return compute_auc(probs, ds.labels), compute_acc(probs, ds.labels)


def finetune_one(model: GfttModel, target: TabularDataset, train_cfg: TrainConfig, seed: int):
    sp = split(target, seed)
    norm = fit_normalizer(target, sp.train)
    data = norm.apply(target)
    result = finetune_target(model, data.subset(sp.train), data.subset(sp.val), train_cfg)
    auc, acc = evaluate(model, data.subset(sp.test))
    return result, auc, acc


@dataclass
class TargetSeedJob:
    """Fine-tune and evaluate one seed; picklable so seeds can run in worker processes.

    With ``init_path`` set, every seed starts from that checkpoint.  Otherwise
    each seed builds its own initialization (seeded by the run seed) from
    ``lm_path`` and ``strategy``.
    """
    cfg: ExperimentConfig
    out_dir: str
    train_cfg: TrainConfig
    init_path: str | None = None
    lm_path: str | None = None
    strategy: str = "proposed"

    def __call__(self, seed: int) -> MetricsRecord:
        start = time.perf_counter()
        sdir = seed_dir(self.out_dir, seed)
        sdir.mkdir(parents=True, exist_ok=True)
        target = load_csv(require(self.cfg.target_csv, "target_csv"))
        init_path = Path(self.init_path) if self.init_path else sdir / INIT_CKPT
        if not self.init_path:
            lm = checkpoint.load(self.lm_path, MiniLm.kind) if self.strategy != "none" else None
            model, mask, lm_hashes = make_init(lm, target, self.cfg, self.strategy, seed)
            write_init(model, mask, lm_hashes, self.strategy, seed, init_path)
        model = checkpoint.load(init_path, GfttModel.kind)
        mask = freeze_mask_of(model)
        reference = checkpoint.read_hash_sidecar(init_path)
        reference.update(model.metadata.get("extra", {}).get("lm_hashes", {}))
        initial_q = {n: model.parameters()[n].data.copy() for n in query_names(mask)}
        result, auc, acc = finetune_one(model, target, dataclasses.replace(self.train_cfg, seed=seed), seed)
        report = verify_frozen(model, mask, reference, initial_q)
        (sdir / VERIFY_JSON).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
        result.write_curve(sdir / CURVE_CSV)
        checkpoint.save(model, sdir / MODEL_CKPT, seed=seed,
                        extra={"best_epoch": result.best_epoch, "auc": auc, "acc": acc})
        return MetricsRecord(seed, auc, acc, result.best_epoch, time.perf_counter() - start)


def _mapper(threads: int):
    if threads <= 1:
        return None, contextlib.nullcontext()
    from concurrent.futures import ProcessPoolExecutor
    pool = ProcessPoolExecutor(max_workers=threads)
    return pool.map, pool


def run_target_seeds(job: TargetSeedJob, seeds, threads: int = 1) -> SeedSummary:
    """All seeds of one configuration, then the frozen-weight check across them."""
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    map_fn, ctx = _mapper(threads)
    with ctx:
        summary = run_seeds(job, seeds, map_fn=map_fn)
    summary.write_jsonl(out / METRICS_JSONL)
    reports = {s: json.loads((seed_dir(out, s) / VERIFY_JSON).read_text(encoding="utf-8")) for s in seeds}
    (out / VERIFY_JSON).write_text(json.dumps({str(s): r for s, r in reports.items()}, indent=2) + "\n",
                                   encoding="utf-8")
    (out / "summary.txt").write_text(
        f"auc {summary.display('auc')}\nacc {summary.display('acc')}\n", encoding="utf-8")
    bad = {s: [t["name"] for t in r["tensors"] if t["status"] != "pass"] for s, r in reports.items()}
    bad = {s: names for s, names in bad.items() if names}
    if bad:
        raise FrozenWeightViolation("frozen tensors changed during fine-tuning: " +
                                    "; ".join(f"seed {s}: {', '.join(n)}" for s, n in sorted(bad.items())))
    return summary


def tune_target(cfg: ExperimentConfig, lm_path: str | None, strategy: str, out_dir: Path) -> TrainConfig:
    """Random search on the first seed's split; returns the selected target config."""
    base = cfg.gftt_train(cfg.seeds[0])
    if cfg.search_trials <= 0:
        return base
    target = load_csv(require(cfg.target_csv, "target_csv"))
    lm = checkpoint.load(lm_path, MiniLm.kind) if strategy != "none" else None
    seed = cfg.seeds[0]

    def objective(trial: TrainConfig) -> float:
        trial_cfg = dataclasses.replace(cfg, gftt_dropout=trial.dropout)
        model, _, _ = make_init(lm, target, trial_cfg, strategy, cfg.gftt_init_seed)
        sp = split(target, seed)
        data = fit_normalizer(target, sp.train).apply(target)
        return finetune_target(model, data.subset(sp.train), data.subset(sp.val), trial).best_val_loss

    result = random_search(objective, HyperparamSpace(), cfg.search_trials, seed=seed, base=base)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "search_log.jsonl", "w", encoding="utf-8") as fh:
        for t in result.trials:
            fh.write(json.dumps({"trial": t.index, "val_loss": t.val_loss, "error": t.error,
                                 **dataclasses.asdict(t.config)}) + "\n")
    return result.best


# -- drivers ---------------------------------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> SeedSummary:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / RESOLVED_CONFIG)
    lm_path = out_dir / LM_CKPT
    if cfg.strategy != "none":
        run_pretrain(cfg, lm_path)
    with phase("finetune-target"):
        train_cfg = tune_target(cfg, str(lm_path), cfg.strategy, out_dir)
        job = TargetSeedJob(cfg, str(out_dir), train_cfg, lm_path=str(lm_path), strategy=cfg.strategy)
        return run_target_seeds(job, cfg.seeds, threads)


def run_ablation(cfg: ExperimentConfig, out_dir: Path, threads: int = 1) -> dict[str, SeedSummary]:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir / RESOLVED_CONFIG)
    lm_path = out_dir / LM_CKPT
    run_pretrain(cfg, lm_path)
    results = {}
    for name in ABLATION_ORDER:
        with phase(f"finetune-target/{name}"):
            sdir = out_dir / name
            train_cfg = tune_target(cfg, str(lm_path), name, sdir)
            job = TargetSeedJob(cfg, str(sdir), train_cfg, lm_path=str(lm_path), strategy=name)
            results[name] = run_target_seeds(job, cfg.seeds, threads)
    write_ablation_table(results, out_dir / "ablation.csv")
    return results


def write_ablation_table(results: dict[str, SeedSummary], path: Path) -> str:
    lines = ["strategy,mean_auc,std_auc,display"]
    for name, s in results.items():
        lines.append(f"{name},{s.mean_auc!r},{s.std_auc!r},{s.display('auc')}")
    text = "\n".join(lines) + "\n"
    path.write_text(text, encoding="utf-8")
    return text


def source_val_loss(lm: MiniLm, source: TabularDataset, seed: int) -> float:
    return source_folds(lm, source, seed)["val"].mean_loss()
