"""End-to-end experiment orchestration.

One :class:`Study` owns everything the evaluation suite needs: a single
pretrained base model shared by all runs, separately trained plugins for
every (family, aspect, seed) cell, zero-shot combinations of those plugins,
jointly trained reference pairs for interference measurement, and the
evaluation corpora. Results are computed lazily and cached in memory, so a
test session can ask for pieces in any order and each training run happens
exactly once.

Protocol notes, fixed here rather than sprinkled through callers:

* Budgets are per aspect, not uniform: rewriting every content token
  (shift) needs several times more steps than inserting one marker (mark).
  Both families train with identical budgets so their comparison is fair.
* The prefix family has no input-level constraint channel, so categorical
  prefix plugins are trained per value (the study pins one value per
  aspect) and the free-form keyword prefix plugin is trained value-blind.
* Multi-aspect evaluation pins categorical values to the same values the
  prefix plugins were trained on — the most favorable footing available to
  the prefix family — and samples keyword values per example.
* Joint references for interference are warm-started from copies of the
  separately trained plugins and then optimized together on multi-aspect
  data; measurement compares them with the untouched separate plugins.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import taskgen as tg
from .interference import MIReport, gate_stats, measure_mi
from .model import BaseModel, ModelConfig
from .optim import pretrain_base
from .plugins import (KEY_DROP, PARAM_NOISE, WEIGHT_DECAY, Plugin,
                      PluginCombo, combine_plugins, decode_with_plugins,
                      joint_train_plugins, train_plugin)
from .rng import derive_seed

ASPECTS = ("shift", "mark", "order", "keyword")

# Steps per single-plugin run, sized to the difficulty of each rewrite.
ASPECT_STEPS = {"shift": 10000, "mark": 2000, "order": 8000, "keyword": 4000}

# One pinned value per categorical aspect: prefix training target and the
# fixed coordinate of every multi-aspect evaluation.
PINNED_VALUES = {"shift": "+1", "mark": "m1", "order": "fwd"}


@dataclass
class StudyConfig:
    """Sizes, seeds, and budgets for one full experiment."""

    model: ModelConfig = field(default_factory=ModelConfig)
    data_seed: int = 42
    plugin_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    aspect_steps: dict[str, int] = field(default_factory=lambda: dict(ASPECT_STEPS))
    joint_steps: int = 2000
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    plugin_lr: float = 3e-3
    plugin_batch: int = 16
    key_drop: float = KEY_DROP
    param_noise: float = PARAM_NOISE
    weight_decay: float = WEIGHT_DECAY
    n_train: int = 4000
    n_heldout: int = 500
    n_eval: int = 300
    core_min: int = 3
    core_max: int = 6

    def corpus_seed(self, tag: str) -> int:
        return derive_seed(self.data_seed, f"study/{tag}")


class Study:
    """Lazily computed experiment artifacts with in-memory caching."""

    def __init__(self, config: StudyConfig | None = None):
        self.config = config or StudyConfig()
        self._base: BaseModel | None = None
        self._base_metrics: dict | None = None
        self._singles: dict[tuple, tuple[Plugin, dict]] = {}
        self._joints: dict[tuple, list[Plugin]] = {}
        self._corpora: dict[tuple, list[tg.Example]] = {}
        self._evals: dict[tuple, dict] = {}
        self.timings: dict[str, float] = {}

    # -- data ---------------------------------------------------------------

    def train_corpus(self, aspects: tuple[str, ...],
                     pinned: bool) -> list[tg.Example]:
        """Training data for one aspect set; pinned fixes categorical values."""
        return self._corpus(aspects, pinned, "train", self.config.n_train)

    def heldout_corpus(self, aspects: tuple[str, ...], pinned: bool,
                       n: int | None = None) -> list[tg.Example]:
        return self._corpus(aspects, pinned, "heldout",
                            n or self.config.n_heldout)

    def eval_corpus(self, aspects: tuple[str, ...]) -> list[tg.Example]:
        """Fixed-value evaluation corpus for combination experiments."""
        return self._corpus(aspects, True, "eval", self.config.n_eval)

    def _corpus(self, aspects: tuple[str, ...], pinned: bool, role: str,
                n: int) -> list[tg.Example]:
        key = (aspects, pinned, role, n)
        if key not in self._corpora:
            cfg = self.config
            values = ({a: PINNED_VALUES[a] for a in aspects if a in PINNED_VALUES}
                      if pinned else None)
            tag = f"{role}/" + "+".join(aspects) + ("/pinned" if pinned else "")
            self._corpora[key] = tg.gen_multi_aspect(
                list(aspects), n, seed=cfg.corpus_seed(tag), values=values,
                min_len=cfg.core_min, max_len=cfg.core_max)
        return self._corpora[key]

    # -- training -----------------------------------------------------------

    @property
    def base(self) -> BaseModel:
        if self._base is None:
            cfg = self.config
            train = tg.gen_base_corpus(cfg.n_train, seed=cfg.corpus_seed("base-train"))
            held = tg.gen_base_corpus(cfg.n_heldout, seed=cfg.corpus_seed("base-heldout"))
            t0 = time.perf_counter()
            self._base, self._base_metrics = pretrain_base(
                train, held, cfg.model, seed=0, steps=cfg.pretrain_steps,
                lr=cfg.pretrain_lr, batch_size=cfg.pretrain_batch)
            self.timings["pretrain"] = time.perf_counter() - t0
        return self._base

    @property
    def base_metrics(self) -> dict:
        self.base
        return self._base_metrics  # type: ignore[return-value]

    def single(self, family: str, aspect: str, seed: int) -> Plugin:
        """The separately trained plugin for one study cell."""
        return self._single(family, aspect, seed)[0]

    def single_metrics(self, family: str, aspect: str, seed: int) -> dict:
        return self._single(family, aspect, seed)[1]

    def _single(self, family: str, aspect: str, seed: int) -> tuple[Plugin, dict]:
        key = (family, aspect, seed)
        if key not in self._singles:
            cfg = self.config
            pinned = family == "prefix" and aspect in PINNED_VALUES
            corpus = self.train_corpus((aspect,), pinned)
            value = PINNED_VALUES[aspect] if pinned else None
            t0 = time.perf_counter()
            plugin, metrics = train_plugin(
                self.base, corpus, aspect, family, seed,
                steps=cfg.aspect_steps[aspect], lr=cfg.plugin_lr,
                batch_size=cfg.plugin_batch, value=value,
                key_drop=cfg.key_drop, param_noise=cfg.param_noise,
                weight_decay=cfg.weight_decay, log_every=500)
            wall = time.perf_counter() - t0
            self.timings[f"single/{family}/{aspect}/seed{seed}"] = wall
            metrics["wall_seconds"] = wall
            self._singles[key] = (plugin, metrics)
        return self._singles[key]

    def combo(self, family: str, aspects: Sequence[str], seed: int) -> PluginCombo:
        """Zero-shot combination of separately trained plugins."""
        return combine_plugins([self.single(family, a, seed) for a in aspects],
                               self.config.model)

    def joint_pair(self, family: str, aspects: tuple[str, str],
                   seed: int) -> list[Plugin]:
        """Jointly trained reference plugins, warm-started from the singles."""
        key = (family, aspects, seed)
        if key not in self._joints:
            cfg = self.config
            warm = [self.single(family, a, seed).clone() for a in aspects]
            corpus = self.train_corpus(aspects, True)
            t0 = time.perf_counter()
            joint_train_plugins(self.base, warm, corpus, seed,
                                steps=cfg.joint_steps, lr=cfg.plugin_lr,
                                batch_size=cfg.plugin_batch, log_every=500)
            self.timings[f"joint/{family}/{'+'.join(aspects)}/seed{seed}"] = (
                time.perf_counter() - t0)
            self._joints[key] = warm
        return self._joints[key]

    # -- evaluation ---------------------------------------------------------

    def evaluate_combo(self, family: str, aspects: tuple[str, ...],
                       seed: int) -> dict:
        """Decode the fixed-value eval corpus under a combination."""
        key = ("combo", family, aspects, seed)
        if key not in self._evals:
            combo = self.combo(family, aspects, seed)
            examples = self.eval_corpus(aspects)
            outs = decode_with_plugins(self.base, combo, examples)
            self._evals[key] = tg.evaluate(outs, examples, list(aspects))
        return self._evals[key]

    def single_scores(self, family: str, seed: int,
                      aspects: Sequence[str] = ASPECTS) -> dict[str, float]:
        """Per-aspect accuracy of each single plugin on fixed-value data."""
        return {a: self.evaluate_combo(family, (a,), seed)["aspects"][a]
                for a in aspects}

    def control_accuracy(self, family: str, aspect: str, seed: int,
                         n: int | None = None) -> float:
        """Single-plugin accuracy on the full value distribution."""
        key = ("control", family, aspect, seed, n)
        if key not in self._evals:
            pinned = family == "prefix" and aspect in PINNED_VALUES
            held = self.heldout_corpus((aspect,), pinned, n)
            combo = combine_plugins([self.single(family, aspect, seed)],
                                    self.config.model)
            outs = decode_with_plugins(self.base, combo, held)
            res = tg.evaluate(outs, held, [aspect])
            self._evals[key] = res
        return self._evals[key]["aspects"][aspect]

    def performance_gaps(self, family: str, aspects: tuple[str, ...],
                         seed: int) -> dict[str, float]:
        """Multi-minus-single accuracy per aspect, on fixed-value data."""
        multi = self.evaluate_combo(family, aspects, seed)["aspects"]
        single = self.single_scores(family, seed, aspects)
        return tg.performance_gap(single, multi)

    # -- interference -------------------------------------------------------

    def mi_report(self, family: str, aspects: tuple[str, str],
                  seed: int) -> MIReport:
        separate = self.combo(family, aspects, seed)
        joint = combine_plugins(self.joint_pair(family, aspects, seed),
                                self.config.model)
        examples = self.eval_corpus(aspects)
        return measure_mi(self.base, separate, joint, examples, seed=seed)

    def gate_report(self, aspect: str, seed: int):
        return gate_stats(self.single("gated", aspect, seed), self.base)

    # -- timing -------------------------------------------------------------

    def single_walls(self, family: str, seed: int) -> dict[str, float]:
        """Wall seconds per aspect, in canonical training order."""
        out = {}
        for aspect in ASPECTS:
            self.single(family, aspect, seed)
            out[aspect] = self.timings[f"single/{family}/{aspect}/seed{seed}"]
        return out
