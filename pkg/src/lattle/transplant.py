"""Moving key/value projections from the mini-LM into gFTT layers.

A strategy maps LM layers to gFTT layers.  LM layers are addressed from
the top (``-1`` is the uppermost block, ``-2`` the one below), so a
preset stays meaningful for any LM depth.  For every pair, W_k, b_k,
W_v and b_v are copied and frozen; every other gFTT tensor stays
trainable.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import tensor_hash
from .errors import FrozenWeightViolation, StrategyError, TransplantError
from .gftt import GfttModel
from .minilm import MiniLm, extract_attention

log = logging.getLogger(__name__)

TRANSPLANTED = ("w_k", "b_k", "w_v", "b_v")


class HeadCountWarning(UserWarning):
    """LM and gFTT split the same d x d projection into different head counts."""


@dataclass(frozen=True)
class TransplantStrategy:
    name: str
    mapping: tuple[tuple[int, int], ...]

    def resolve(self, n_lm_layers: int, n_gftt_layers: int) -> list[tuple[int, int]]:
        """Concrete (lm_layer, gftt_layer) pairs, validated against both depths."""
        pairs, seen = [], set()
        for src, dst in self.mapping:
            s = src + n_lm_layers if src < 0 else src
            if not 0 <= s < n_lm_layers:
                raise TransplantError(f"strategy {self.name}: LM layer {src} invalid for {n_lm_layers} layers")
            if not 0 <= dst < n_gftt_layers:
                raise TransplantError(f"strategy {self.name}: gFTT layer {dst} invalid for {n_gftt_layers} layers")
            if dst in seen:
                raise StrategyError(f"strategy {self.name}: gFTT layer {dst} receives two transplants")
            seen.add(dst)
            pairs.append((s, dst))
        return pairs


PRESETS = {
    "proposed": TransplantStrategy("proposed", ((-1, 0),)),
    "top-to-two": TransplantStrategy("top-to-two", ((-1, 0), (-1, 1))),
    "toptwo-to-two": TransplantStrategy("toptwo-to-two", ((-1, 0), (-2, 1))),
    "none": TransplantStrategy("none", ()),
}
ABLATION_ORDER = ("proposed", "top-to-two", "toptwo-to-two", "none")


def get_strategy(name: str) -> TransplantStrategy:
    try:
        return PRESETS[name]
    except KeyError:
        raise StrategyError(f"unknown transplant strategy {name!r}; choose from {', '.join(PRESETS)}") from None


@dataclass(frozen=True)
class FreezeMask:
    names: frozenset[str] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def sorted(self) -> list[str]:
        return sorted(self.names)

    def layers(self) -> set[int]:
        return {int(n.split(".")[1]) for n in self.names}


def freeze_mask_of(model) -> FreezeMask:
    return FreezeMask(frozenset(n for n, p in model.parameters().items() if p.frozen))


def head_count_compat(lm_heads: int, gftt_heads: int) -> None:
    """Warn when the head split differs; the d x d matrices transfer either way."""
    if lm_heads != gftt_heads:
        warnings.warn(f"LM uses {lm_heads} heads, gFTT uses {gftt_heads}: transplanted projections "
                      "are regrouped into different heads", HeadCountWarning, stacklevel=2)


def transplant(lm: MiniLm, model: GfttModel, strategy: TransplantStrategy) -> FreezeMask:
    """Copy K/V projections per ``strategy`` and freeze exactly those tensors."""
    d_lm, d_gftt = lm.config.d_model, model.config.d_model
    if d_lm != d_gftt:
        raise TransplantError(f"LM d_model={d_lm} does not match gFTT d_model={d_gftt}; "
                              "the transplant needs equal geometry")
    pairs = strategy.resolve(lm.config.n_layers, model.config.n_layers)
    if pairs:
        head_count_compat(lm.config.n_heads, model.config.n_heads)
    # every LM weight of the source layer is extracted; only K/V are installed
    bundles = extract_attention(lm, [src for src, _ in pairs])
    names = set()
    for p in model.parameters().values():
        p.frozen = False
    for (src, dst), bundle in zip(pairs, bundles):
        layer = model.layers[dst]
        for attr in TRANSPLANTED:
            t = getattr(layer, attr)
            t.data = getattr(bundle, attr).data.astype(t.dtype, copy=True)
            t.frozen = True
            names.add(f"layers.{dst}.{attr}")
        log.info("transplanted LM layer %d K/V into gFTT layer %d", src, dst)
    return FreezeMask(frozenset(names))


def reference_hashes(lm: MiniLm, strategy: TransplantStrategy, n_gftt_layers: int) -> dict[str, str]:
    """Hashes the gFTT's frozen tensors must carry, computed from the LM side."""
    out = {}
    for src, dst in strategy.resolve(lm.config.n_layers, n_gftt_layers):
        for attr in TRANSPLANTED:
            out[f"layers.{dst}.{attr}"] = tensor_hash(getattr(lm.layers[src], attr))
    return out


@dataclass
class TensorCheck:
    name: str
    expected: str
    actual: str

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


@dataclass
class VerifyReport:
    checks: list[TensorCheck]
    query_changed: dict[str, bool]
    query_distance: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def failures(self) -> list[str]:
        return [c.name for c in self.checks if not c.ok]

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "tensors": [{"name": c.name, "expected": c.expected, "actual": c.actual,
                             "status": "pass" if c.ok else "fail"} for c in self.checks],
                "query_changed": self.query_changed,
                "query_distance": self.query_distance}

    def enforce(self) -> None:
        if not self.passed:
            raise FrozenWeightViolation("frozen tensors changed: " + ", ".join(self.failures()))


def verify_frozen(model, mask: FreezeMask, reference: dict[str, str],
                  initial_query: dict[str, np.ndarray] | None = None) -> VerifyReport:
    """Compare frozen tensors to reference hashes and report W_q movement.

    ``reference`` maps tensor names to expected hashes (it may hold more
    names than the mask).  ``initial_query`` maps ``layers.i.w_q`` names of
    the transplanted layers to their values before training.
    """
    params = model.parameters()
    checks = [TensorCheck(name, reference.get(name, "<missing>"), tensor_hash(params[name]))
              for name in mask.sorted()]
    changed, dist = {}, {}
    for name, before in (initial_query or {}).items():
        d = float(np.linalg.norm(params[name].data.astype(np.float64) - before.astype(np.float64)))
        dist[name] = d
        changed[name] = d > 0.0
    return VerifyReport(checks, changed, dist)


def query_names(mask: FreezeMask) -> list[str]:
    return [f"layers.{i}.w_q" for i in sorted(mask.layers())]
