"""Recall@K for PredCls / SgCls / SgDet under three predicate-selection strategies."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenegraph import BoundingBox, VideoSample, change_degree, iou

TASKS = ("predcls", "sgcls", "sgdet")
STRATEGIES = ("with_constraints", "no_constraints", "top_k")


@dataclass(frozen=True)
class Detection:
    instance_id: int
    class_id: int
    score: float
    box: BoundingBox


@dataclass(frozen=True)
class ScoredTriplet:
    subject: Detection
    object: Detection
    predicate: int
    score: float

    @property
    def order_key(self):
        return (-self.score, self.subject.instance_id, self.object.instance_id, self.predicate)


@dataclass(frozen=True)
class GroundTruthTriplet:
    subject_id: int
    subject_class: int
    subject_box: BoundingBox
    object_id: int
    object_class: int
    object_box: BoundingBox
    predicate: int


@dataclass
class FramePrediction:
    """Candidate pairs of one frame and their per-predicate sigmoid scores ``[pairs, predicates]``."""
    pairs: list[tuple[Detection, Detection]]
    scores: np.ndarray


@dataclass
class EvalConfig:
    Ks: tuple[int, ...] = (10, 20, 50)
    strategy: str = "with_constraints"
    top_k: int = 6
    budget: int = 100
    iou_threshold: float = 0.5
    task: str = "predcls"

    def __post_init__(self):
        self.Ks = tuple(int(k) for k in self.Ks)
        if list(self.Ks) != sorted(self.Ks) or not self.Ks:
            raise ValueError("Ks must be ascending")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        self.task = self.task.lower()
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")


def select_predictions(pred: FramePrediction, strategy: str, cfg: EvalConfig,
                       category_of: np.ndarray | None = None) -> list[ScoredTriplet]:
    """Pick predicates per pair and rank the resulting triplets.

    with_constraints: the arg-max predicate of each category for every pair
    (one per pair when all predicates share a category). no_constraints: every
    pair x predicate, best ``cfg.budget`` per frame. top_k: the ``cfg.top_k``
    best predicates per pair. Ties go to (subject, object, predicate) ascending.
    """
    out: list[ScoredTriplet] = []
    n_pred = pred.scores.shape[1] if pred.scores.ndim == 2 else 0
    cats = np.zeros(n_pred, dtype=np.int64) if category_of is None else np.asarray(category_of)
    for (s, o), row in zip(pred.pairs, pred.scores):
        if strategy == "with_constraints":
            chosen = [int(ids[np.argmax(row[ids])]) for ids in (np.flatnonzero(cats == c) for c in np.unique(cats))]
        elif strategy == "top_k":
            chosen = sorted(range(n_pred), key=lambda j: (-row[j], j))[: cfg.top_k]
        elif strategy == "no_constraints":
            chosen = range(n_pred)
        else:
            raise ValueError(f"unknown strategy {strategy!r}")
        for j in chosen:
            out.append(ScoredTriplet(s, o, int(j), s.score * o.score * float(row[j])))
    out.sort(key=lambda t: t.order_key)
    if strategy == "no_constraints":
        out = out[: cfg.budget]
    return out


def triplet_matches(p: ScoredTriplet, g: GroundTruthTriplet, task: str, iou_threshold: float = 0.5) -> bool:
    if p.predicate != g.predicate:
        return False
    if task == "predcls":
        return p.subject.instance_id == g.subject_id and p.object.instance_id == g.object_id
    if p.subject.class_id != g.subject_class or p.object.class_id != g.object_class:
        return False
    if task == "sgcls":
        return p.subject.box == g.subject_box and p.object.box == g.object_box
    if task == "sgdet":
        return iou(p.subject.box, g.subject_box) >= iou_threshold and iou(p.object.box, g.object_box) >= iou_threshold
    raise ValueError(f"unknown task {task!r}")


def _max_matching(adj: list[list[int]], n_gt: int) -> int:
    """Augmenting-path matching, visiting predictions in ranked order."""
    owner = [-1] * n_gt

    def augment(i: int, seen: list[bool]) -> bool:
        for j in adj[i]:
            if seen[j]:
                continue
            seen[j] = True
            if owner[j] < 0 or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    hits = 0
    for i in range(len(adj)):
        if adj[i] and augment(i, [False] * n_gt):
            hits += 1
    return hits


def match_and_recall(predictions: Sequence[ScoredTriplet], gt: Sequence[GroundTruthTriplet], task: str,
                     cfg: EvalConfig) -> dict[int, float] | None:
    """Recall at each K for one frame, or None when the frame has no ground truth.

    Every prediction hits at most one ground-truth triplet and vice versa; hits
    are the size of the largest such assignment among the top K predictions.
    """
    if not gt:
        return None
    task = task.lower()
    adj = [[j for j, g in enumerate(gt) if triplet_matches(p, g, task, cfg.iou_threshold)]
           for p in predictions[: max(cfg.Ks)]]
    return {K: _max_matching(adj[:K], len(gt)) / len(gt) for K in cfg.Ks}


def frame_ground_truth(frame) -> list[GroundTruthTriplet]:
    ents = {e.instance_id: e for e in frame.entities}
    out = []
    for r in frame.edges:
        s, o = ents[r.subject_id], ents[r.object_id]
        for p in sorted(r.labels):
            out.append(GroundTruthTriplet(s.instance_id, s.class_id, s.box, o.instance_id, o.class_id, o.box, p))
    return out


# ---------------------------------------------------------------- aggregation


@dataclass
class RecallReport:
    values: dict[tuple[str, str, int], float] = field(default_factory=dict)
    frames: dict[tuple[str, str], int] = field(default_factory=dict)

    def get(self, task: str, strategy: str, K: int) -> float:
        return self.values[(task, strategy, K)]

    def rows(self) -> list[tuple[str, str, int, float]]:
        return [(t, s, k, v) for (t, s, k), v in sorted(self.values.items())]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task", "strategy", "K", "recall"])
            for t, s, k, v in self.rows():
                w.writerow([t, s, k, f"{v:.6f}"])


def frame_recalls(predictions: Sequence[FramePrediction], gts: Sequence[Sequence[GroundTruthTriplet]],
                  cfg: EvalConfig, category_of: np.ndarray | None = None) -> list[dict[int, float] | None]:
    out = []
    for pred, gt in zip(predictions, gts):
        ranked = select_predictions(pred, cfg.strategy, cfg, category_of)
        out.append(match_and_recall(ranked, gt, cfg.task, cfg))
    return out


def mean_recall(per_frame: Sequence[dict[int, float] | None], Ks: Sequence[int]) -> dict[int, float]:
    counted = [r for r in per_frame if r is not None]
    if not counted:
        return {K: 0.0 for K in Ks}
    return {K: float(np.mean([r[K] for r in counted])) for K in Ks}


# ---------------------------------------------------------------- change-degree strata


@dataclass
class Stratum:
    upper: float
    video_ids: list[str]
    recall: float
    baseline_recall: float | None = None

    @property
    def gain(self) -> float | None:
        return None if self.baseline_recall is None else self.recall - self.baseline_recall


def stratum_bounds(videos: Sequence[VideoSample], steps: int = 10) -> tuple[list[VideoSample], list[float], list[int]]:
    """Videos sorted by change degree, cumulative proportion bounds, and prefix sizes.

    All zero-change videos are merged into the first stratum.
    """
    order = sorted(videos, key=lambda v: (change_degree(v), v.video_id))
    n = len(order)
    zeros = sum(change_degree(v) == 0.0 for v in order)
    bounds, sizes = [], []
    if zeros:
        bounds.append(zeros / n)
        sizes.append(zeros)
    for k in range(1, steps + 1):
        size = int(round(k * n / steps))
        if size > (sizes[-1] if sizes else 0):
            bounds.append(size / n)
            sizes.append(size)
    return order, bounds, sizes


def stratified_eval(videos: Sequence[VideoSample], model_recall: dict[str, list[dict[int, float] | None]],
                    K: int, baseline_recall: dict[str, list[dict[int, float] | None]] | None = None,
                    steps: int = 10) -> list[Stratum]:
    """Cumulative change-degree strata with pooled per-frame recall at ``K``.

    ``model_recall`` maps video id to that video's per-frame recall dicts.
    """
    order, bounds, sizes = stratum_bounds(videos, steps)

    def pooled(source, ids):
        vals = [r[K] for vid in ids for r in source[vid] if r is not None]
        return float(np.mean(vals)) if vals else 0.0

    out = []
    for upper, size in zip(bounds, sizes):
        ids = [v.video_id for v in order[:size]]
        base = pooled(baseline_recall, ids) if baseline_recall is not None else None
        out.append(Stratum(upper, ids, pooled(model_recall, ids), base))
    return out


def write_strata_csv(path: str | Path, strata: Sequence[Stratum]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum_upper", "recall", "baseline_recall", "gain"])
        for s in strata:
            base = "" if s.baseline_recall is None else f"{s.baseline_recall:.6f}"
            gain = "" if s.gain is None else f"{s.gain:.6f}"
            w.writerow([f"{s.upper:.4f}", f"{s.recall:.6f}", base, gain])
