"""Desk-scale experiments shared by scripts/ and the acceptance tests.

Every experiment starts from :func:`protocol`: 300 synthetic videos split
200 / 50 / 50, fifty epochs, epoch picked on validation R@10.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig, parse_config
from .metrics import Stratum, stratified_eval
from .scenegraph import change_degree
from .synth import generate
from .train import (
    FIG4_ROWS,
    TABLE3_ROWS,
    AblationRow,
    RunRecord,
    ablate,
    evaluate,
    format_ablation_table,
    partition,
    train,
)

PROTOCOL = """\
gen.seed = 7
gen.num_videos = 300
gen.frames_per_video = 8
gen.subtlety = 0.3
gen.change_rate = 0.3
split = 0.6666666666666667, 0.16666666666666667, 0.16666666666666666
split_seed = 0
epochs = 50
batch_size = 10
select_best = true
fusion.dropout = 0.4
"""

SEEDS = (0, 1, 2)
HIGH_CHANGE = "gen.change_rate = 0.5"
MIXED_CHANGE = "gen.change_rate_mix = 0, 0.2, 0.5, 0.8"


def protocol(*overrides: str) -> RunConfig:
    """The shared protocol with ``key = value`` lines applied on top."""
    return parse_config(PROTOCOL + "\n".join(overrides))


@dataclass
class Data:
    train: list
    val: list
    test: list
    embeddings: dict


def prepare(cfg: RunConfig) -> Data:
    videos, emb = generate(cfg.gen)
    tr, va, te = partition(cfg, videos)
    return Data(tr, va, te, emb)


def held_out_recall(cfg: RunConfig, params, videos, embeddings) -> float:
    rep, _ = evaluate(cfg, params, videos, embeddings, strategies=("with_constraints",))
    return rep.get(cfg.task, "with_constraints", cfg.eval.Ks[0])


@dataclass
class Learnability:
    recall: float
    val_recall: float
    seconds: float
    record: RunRecord


def learnability(cfg: RunConfig | None = None, data: Data | None = None) -> Learnability:
    """Train the full model once and score the test split."""
    cfg = cfg or protocol()
    data = data or prepare(cfg)
    start = time.perf_counter()
    params, record = train(cfg, data.train, data.embeddings, data.val, eval_every=1 if cfg.select_best else 0)
    seconds = time.perf_counter() - start
    return Learnability(held_out_recall(cfg, params, data.test, data.embeddings),
                        held_out_recall(cfg, params, data.val, data.embeddings), seconds, record)


@dataclass
class Comparison:
    rows: list[AblationRow]
    table: str
    test_videos: list = field(default_factory=list)

    def means(self, K: int = 10) -> dict[str, float]:
        return {r.name: r.mean(K) for r in self.rows}


def compare(cfg: RunConfig, variants: Sequence[tuple[str, dict]], seeds: Sequence[int] = SEEDS,
            data: Data | None = None, keep_per_video: bool = False) -> Comparison:
    data = data or prepare(cfg)
    rows = ablate(cfg, variants, seeds, data.train, data.test, data.embeddings,
                  keep_per_video=keep_per_video, val_videos=data.val)
    return Comparison(rows, format_ablation_table(rows, cfg.eval.Ks), data.test)


def guidance_trend(cfg: RunConfig | None = None, seeds: Sequence[int] = SEEDS) -> Comparison:
    """No guidance vs binary change head vs difference guidance."""
    return compare(cfg or protocol(), FIG4_ROWS, seeds)


def difference_ablation(cfg: RunConfig | None = None, seeds: Sequence[int] = SEEDS) -> Comparison:
    """Direct per-frame distillation vs difference distillation on high-change videos."""
    return compare(cfg or protocol(HIGH_CHANGE), TABLE3_ROWS, seeds)


@dataclass
class StrataGain:
    per_seed: list[list[Stratum]]
    zero_fraction: float  # share of test videos without any change; stratum 0 holds them when > 0

    def mean_gain(self, index: int) -> float:
        return float(np.mean([s[index].gain for s in self.per_seed]))


def strata_gain(cfg: RunConfig | None = None, seeds: Sequence[int] = SEEDS) -> StrataGain:
    """Gain of difference guidance over no guidance per cumulative change-degree stratum.

    Stratum 0 holds the zero-change videos; the last stratum holds every test video.
    """
    cfg = cfg or protocol(MIXED_CHANGE)
    cmp = compare(cfg, (FIG4_ROWS[0], FIG4_ROWS[2]), seeds, keep_per_video=True)
    base, model = cmp.rows
    K = cfg.eval.Ks[0]
    per_seed = [stratified_eval(cmp.test_videos, m, K, b) for m, b in zip(model.strata, base.strata)]
    zero = sum(change_degree(v) == 0.0 for v in cmp.test_videos) / max(len(cmp.test_videos), 1)
    return StrataGain(per_seed, zero)

