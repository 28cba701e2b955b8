"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DEFAULT_SEEDS
from .errors import ConfigError
from .gftt import GfttConfig
from .minilm import LmConfig
from .training import SOURCE_DEFAULTS, TARGET_DEFAULTS, TrainConfig
from .transplant import PRESETS

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    # paths; relative ones resolve against the config file's directory
    source_csv: str = ""
    target_csv: str = ""
    out_dir: str = ""
    # geometry
    d_model: int = 64
    lm_layers: int = 6
    lm_heads: int = 4
    gftt_layers: int = 5
    gftt_heads: int = 8
    ffn_hidden: int = 256
    max_len: int = 1024
    lm_full_finetune: bool = False
    lm_ar_epochs: int = 0
    # source phase
    lm_lr: float = SOURCE_DEFAULTS.learning_rate
    lm_batch: int = SOURCE_DEFAULTS.batch_size
    lm_epochs: int = SOURCE_DEFAULTS.max_epochs
    lm_weight_decay: float = SOURCE_DEFAULTS.weight_decay
    lm_warmup_ratio: float = SOURCE_DEFAULTS.warmup_ratio
    lm_dropout: float = SOURCE_DEFAULTS.dropout
    # target phase
    gftt_lr: float = TARGET_DEFAULTS.learning_rate
    gftt_batch: int = TARGET_DEFAULTS.batch_size
    gftt_epochs: int = TARGET_DEFAULTS.max_epochs
    gftt_weight_decay: float = TARGET_DEFAULTS.weight_decay
    gftt_warmup_ratio: float = TARGET_DEFAULTS.warmup_ratio
    gftt_dropout: float = TARGET_DEFAULTS.dropout
    # protocol
    strategy: str = "proposed"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    pretrain_seed: int = 0
    gftt_init_seed: int = 0
    search_trials: int = 0

    def validate(self) -> None:
        if self.strategy not in PRESETS:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(PRESETS)}")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.search_trials < 0:
            raise ConfigError("search_trials must be >= 0")
        if self.lm_ar_epochs < 0:
            raise ConfigError("lm_ar_epochs must be >= 0")
        self.lm_train().validate()
        self.gftt_train().validate()
        self.gftt_config().validate()

    # -- derived configs ---------------------------------------------------------
    def lm_config(self, vocab_size: int, n_classes: int) -> LmConfig:
        return LmConfig(vocab_size=vocab_size, n_classes=n_classes, n_layers=self.lm_layers,
                        n_heads=self.lm_heads, d_model=self.d_model, ffn_hidden=self.ffn_hidden,
                        max_len=self.max_len, dropout=self.lm_dropout, head_d_model=self.d_model,
                        head_heads=self.gftt_heads, full_finetune=self.lm_full_finetune)

    def gftt_config(self) -> GfttConfig:
        return GfttConfig(n_layers=self.gftt_layers, n_heads=self.gftt_heads, d_model=self.d_model,
                          ffn_hidden=self.ffn_hidden, dropout=self.gftt_dropout)

    def lm_train(self) -> TrainConfig:
        return TrainConfig(self.lm_lr, self.lm_batch, self.lm_weight_decay, self.lm_dropout,
                           self.lm_warmup_ratio, self.lm_epochs, self.pretrain_seed)

    def gftt_train(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.gftt_lr, self.gftt_batch, self.gftt_weight_decay, self.gftt_dropout,
                           self.gftt_warmup_ratio, self.gftt_epochs, seed)

    # -- text form -----------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> "ExperimentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
            if key not in kinds:
                raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
            values[key] = _convert(key, kinds[key], value, f"{origin}:{lineno}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.parse(text, str(path))
        return cfg.resolve_paths(path.parent)

    def resolve_paths(self, base) -> "ExperimentConfig":
        base = Path(base)
        updates = {}
        for name in ("source_csv", "target_csv", "out_dir"):
            v = getattr(self, name)
            if v and not Path(v).is_absolute():
                updates[name] = str((base / v).resolve())
        return dataclasses.replace(self, **updates)


def _convert(key: str, kind: str, value: str, where: str):
    try:
        if kind == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind.startswith("tuple"):
            return tuple(int(x) for x in value.replace(" ", "").split(",") if x)
        return value
    except ValueError:
        raise ConfigError(f"{where}: bad value {value!r} for {key} ({kind})") from None
