"""Command-line entry point: ``lattle <command> ...`` or ``python -m lattle``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training or
numeric error, 4 frozen-weight contract violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ExperimentConfig
from .data import check_disjoint, write_csv
from .errors import ConfigError, DataError, LattleError
from .synth import DEFAULT_SOURCE, DEFAULT_TARGET, gen_synthetic_pair
from .transplant import PRESETS

log = logging.getLogger("lattle")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _configure_logging() -> None:
    name = os.environ.get("LATTLE_LOG", "error").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"LATTLE_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _split_features(total: int) -> tuple[int, int]:
    """Numeric/categorical split for a feature total: a third categorical."""
    n_cat = total // 3
    return total - n_cat, n_cat


def cmd_gen_synth(args) -> int:
    src_spec, tgt_spec = DEFAULT_SOURCE, DEFAULT_TARGET
    if args.source_samples is not None:
        src_spec = dataclasses.replace(src_spec, n_samples=args.source_samples)
    if args.target_samples is not None:
        tgt_spec = dataclasses.replace(tgt_spec, n_samples=args.target_samples)
    if args.source_features is not None:
        n_num, n_cat = _split_features(args.source_features)
        src_spec = dataclasses.replace(src_spec, n_numeric=n_num, n_categorical=n_cat)
    if args.target_features is not None:
        n_num, n_cat = _split_features(args.target_features)
        tgt_spec = dataclasses.replace(tgt_spec, n_numeric=n_num, n_categorical=n_cat)
    if args.margin is not None:
        src_spec = dataclasses.replace(src_spec, margin=args.margin)
        tgt_spec = dataclasses.replace(tgt_spec, margin=args.margin)
    source, target = gen_synthetic_pair(args.seed, src_spec, tgt_spec)
    check_disjoint(source.schema, target.schema)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(source, out / "source.csv")
    write_csv(target, out / "target.csv")
    print(f"wrote {out / 'source.csv'} ({len(source)} x {source.schema.n_features + 1}) and "
          f"{out / 'target.csv'} ({len(target)} x {target.schema.n_features + 1})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    run = pipeline.run_pretrain(cfg, Path(args.out))
    print(f"source LM: best epoch {run.result.best_epoch}, val loss {run.val_loss:.6f}, "
          f"train acc {run.train_acc:.4f}")
    return 0


def cmd_transplant(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out)
    mask = pipeline.run_transplant(cfg, Path(args.lm), args.strategy, out)
    cfg.write(out.with_name(out.stem + "_" + pipeline.RESOLVED_CONFIG))
    print(f"strategy {args.strategy}: {len(mask)} frozen tensors: {', '.join(mask.sorted()) or '-'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / pipeline.RESOLVED_CONFIG)
    with pipeline.phase("finetune-target"):
        job = pipeline.TargetSeedJob(cfg, str(out), cfg.gftt_train(cfg.seeds[0]), init_path=str(args.init))
        summary = pipeline.run_target_seeds(job, cfg.seeds, args.threads)
    print(f"AUC {summary.display('auc')}  ACC {summary.display('acc')}")
    return 0


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    return Path(out)


def cmd_run_pipeline(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    summary = pipeline.run_pipeline(cfg, _out_dir(args, cfg), args.threads)
    print(f"AUC {summary.display('auc')}  ACC {summary.display('acc')}")
    return 0


def cmd_ablation(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    results = pipeline.run_ablation(cfg, _out_dir(args, cfg), args.threads)
    width = max(len(n) for n in results)
    print(f"{'strategy':<{width}}  AUC mean (std)")
    for name, s in results.items():
        print(f"{name:<{width}}  {s.display('auc')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lattle", description="Attention-transplant transfer learning for tables.")
    parser.add_argument("--threads", type=int, default=1, help="parallel worker processes for seeds")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic source/target pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--source-samples", type=int)
    p.add_argument("--target-samples", type=int)
    p.add_argument("--source-features", type=int)
    p.add_argument("--target-features", type=int)
    p.add_argument("--margin", type=float)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain-source", help="fine-tune the mini-LM on the source table")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path, e.g. lm.ckpt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("transplant", help="build a gFTT initialization with transplanted K/V")
    p.add_argument("--lm", required=True)
    p.add_argument("--strategy", choices=sorted(PRESETS), default="proposed")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transplant)

    p = sub.add_parser("finetune-target", help="fine-tune the gFTT on the target table for every seed")
    p.add_argument("--init", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    for name, func, text in (("run-pipeline", cmd_run_pipeline, "all phases end to end"),
                             ("ablation", cmd_ablation, "all transplant strategies plus a control")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--out")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.func(args)
    except LattleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
