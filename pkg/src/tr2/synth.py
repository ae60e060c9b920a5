"""Seeded synthetic dynamic scene graphs.

Each video has one person and ``pairs_per_frame`` objects; every (person, object)
pair carries one active predicate per category. Between adjacent frames each
category switches to a different predicate with probability ``change_rate``.
Which predicate becomes active is drawn from an object-class preference, as
real relation statistics are strongly class-dependent.
Per pair-frame a cropped-region embedding is emitted around a prototype built
from the subject class, object class and active predicates; ``subtlety`` scales
its Gaussian noise against the unit separation of predicate prototypes.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenegraph import (
    BoundingBox,
    EntityInstance,
    FrameGraph,
    RelationEdge,
    VideoSample,
    Vocabulary,
    quantize,
)

PairKey = tuple[str, int, int, int]  # (video_id, frame_index, subject_id, object_id)


@dataclass
class GenConfig:
    seed: int = 0
    num_videos: int = 50
    frames_per_video: int = 8
    pairs_per_frame: int = 3
    entity_class_count: int = 36
    predicate_partition: tuple[int, int, int] = (3, 6, 17)
    change_rate: float = 0.3
    # per-video change rates cycled by video index; overrides change_rate when set
    change_rate_mix: tuple[float, ...] = ()
    subtlety: float = 0.3
    # object classes favour `affordance_size` predicates per category with this total mass
    affordance_mass: float = 0.85
    affordance_size: int = 2
    visual_noise: float = 0.1
    box_jitter: float = 0.02
    class_confusion: float = 0.1
    d_v: int = 16
    d_clip: int = 32

    def __post_init__(self):
        self.predicate_partition = tuple(int(x) for x in self.predicate_partition)
        self.change_rate_mix = tuple(float(x) for x in self.change_rate_mix)
        for name in ("num_videos", "frames_per_video", "pairs_per_frame", "entity_class_count", "d_v", "d_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pairs_per_frame >= self.entity_class_count:
            raise ValueError("pairs_per_frame needs that many distinct object classes besides person")
        if self.affordance_size <= 0:
            raise ValueError("affordance_size must be positive")
        for name in ("change_rate", "class_confusion", "affordance_mass"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if any(not 0.0 <= p <= 1.0 for p in self.change_rate_mix):
            raise ValueError("change_rate_mix entries must lie in [0, 1]")
        for name in ("subtlety", "visual_noise", "box_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        Vocabulary.build(self.entity_class_count, self.predicate_partition)

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary.build(self.entity_class_count, self.predicate_partition)

    def rate_for(self, video_index: int) -> float:
        if self.change_rate_mix:
            return self.change_rate_mix[video_index % len(self.change_rate_mix)]
        return self.change_rate


@dataclass
class Prototypes:
    visual: np.ndarray        # [classes, d_v]
    clip_class: np.ndarray    # [classes, d_clip]
    clip_predicate: np.ndarray  # [predicates, d_clip], pairwise distance 1 when d_clip >= predicates
    preference: np.ndarray    # [classes, predicates], sums to 1 within each category

    def crop_prototype(self, subj_cls: int, obj_cls: int, labels) -> np.ndarray:
        out = 0.5 * (self.clip_class[subj_cls] + self.clip_class[obj_cls])
        for p in sorted(labels):
            out = out + self.clip_predicate[p]
        return out


def make_prototypes(cfg: GenConfig) -> Prototypes:
    rng = np.random.default_rng([cfg.seed, 7919])
    n_pred = sum(cfg.predicate_partition)
    vis = rng.normal(size=(cfg.entity_class_count, cfg.d_v))
    vis /= np.linalg.norm(vis, axis=1, keepdims=True)
    cls = rng.normal(size=(cfg.entity_class_count, cfg.d_clip))
    cls /= np.linalg.norm(cls, axis=1, keepdims=True)
    raw = rng.normal(size=(cfg.d_clip, max(n_pred, cfg.d_clip)))
    if cfg.d_clip >= n_pred:
        q, _ = np.linalg.qr(raw[:, :n_pred])
        pred = q.T
    else:
        pred = raw[:, :n_pred].T
        pred /= np.linalg.norm(pred, axis=1, keepdims=True)
    pref = np.zeros((cfg.entity_class_count, n_pred))
    groups = list(cfg.vocabulary.category_ids().values())
    for c in range(cfg.entity_class_count):
        for g in groups:
            k = len(g)
            fav = rng.choice(k, size=min(cfg.affordance_size, k), replace=False)
            if len(fav) == k:
                w = np.full(k, 1.0 / k)
            else:
                w = np.full(k, (1.0 - cfg.affordance_mass) / (k - len(fav)))
                w[fav] = cfg.affordance_mass / len(fav)
            pref[c, g] = w / w.sum()
    return Prototypes(vis, cls, pred / np.sqrt(2.0), pref)


def _draw(rng, ids: list[int], weights: np.ndarray) -> int:
    w = weights / weights.sum() if weights.sum() > 0 else np.full(len(ids), 1.0 / len(ids))
    return int(ids[int(rng.choice(len(ids), p=w))])


def _random_box(rng) -> np.ndarray:
    w, h = rng.uniform(0.1, 0.4, size=2)
    x, y = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
    return np.array([x, y, x + w, y + h])


def _clip_box(b: np.ndarray) -> BoundingBox:
    b = np.clip(b, 0.0, 1.0)
    x1, y1, x2, y2 = b
    if x2 - x1 < 0.01:
        x1, x2 = min(x1, 0.99), min(x1, 0.99) + 0.01
    if y2 - y1 < 0.01:
        y1, y2 = min(y1, 0.99), min(y1, 0.99) + 0.01
    x1, y1, x2, y2 = quantize([x1, y1, x2, y2])
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def _detector_scores(rng, true_cls: int, n_cls: int, confusion: float) -> np.ndarray:
    detected = true_cls
    if n_cls > 1 and rng.random() < confusion:
        detected = int(rng.choice([c for c in range(n_cls) if c != true_cls]))
    # ten-thousandths so the printed values sum to one exactly
    counts = np.zeros(n_cls, dtype=np.int64)
    top = int(rng.integers(5000, 9001))
    counts[detected] = top
    if n_cls > 1:
        others = [c for c in range(n_cls) if c != detected]
        second = int(rng.choice(others))
        counts[second] = 10000 - top
    else:
        counts[detected] = 10000
    return counts / 10000.0


def generate_video(cfg: GenConfig, index: int, protos: Prototypes) -> tuple[VideoSample, dict[PairKey, np.ndarray]]:
    rng = np.random.default_rng([cfg.seed, 104729, index])
    vocab = cfg.vocabulary
    groups = list(vocab.category_ids().values())
    n_cls = cfg.entity_class_count
    n_obj = cfg.pairs_per_frame
    vid = f"v{index:05d}"
    rate = cfg.rate_for(index)

    classes = [0] + [int(c) for c in rng.choice(np.arange(1, n_cls), size=n_obj, replace=False)]
    boxes = [_random_box(rng) for _ in classes]
    pref = protos.preference
    state = [[_draw(rng, g, pref[classes[j + 1], g]) for g in groups] for j in range(n_obj)]

    frames = []
    embeds: dict[PairKey, np.ndarray] = {}
    for t in range(cfg.frames_per_video):
        if t > 0:
            for j, pair_state in enumerate(state):
                for ci, g in enumerate(groups):
                    if len(g) > 1 and rng.random() < rate:
                        others = [p for p in g if p != pair_state[ci]]
                        pair_state[ci] = _draw(rng, others, pref[classes[j + 1], others])
            boxes = [np.clip(b + np.tile(rng.normal(0.0, 0.02, size=2), 2), 0.0, 1.0) for b in boxes]
        ents = []
        for iid, (cls, b) in enumerate(zip(classes, boxes)):
            true_box = _clip_box(b)
            feat = quantize(protos.visual[cls] + rng.normal(0.0, cfg.visual_noise, size=cfg.d_v))
            det = _clip_box(np.array(true_box.as_tuple()) + rng.normal(0.0, cfg.box_jitter, size=4))
            scores = _detector_scores(rng, cls, n_cls, cfg.class_confusion)
            ents.append(EntityInstance(iid, cls, true_box, feat, scores, det))
        edges = []
        for j, pair_state in enumerate(state):
            labels = frozenset(pair_state)
            edges.append(RelationEdge(0, j + 1, labels))
            proto = protos.crop_prototype(classes[0], classes[j + 1], labels)
            embeds[(vid, t, 0, j + 1)] = quantize(proto + rng.normal(0.0, cfg.subtlety, size=cfg.d_clip))
        frames.append(FrameGraph(t, tuple(ents), tuple(edges)))
    return VideoSample(vid, tuple(frames)), embeds


def generate(cfg: GenConfig) -> tuple[list[VideoSample], dict[PairKey, np.ndarray]]:
    """Videos in index order plus cropped-region embeddings keyed by pair-frame."""
    protos = make_prototypes(cfg)
    videos, embeds = [], {}
    for i in range(cfg.num_videos):
        v, e = generate_video(cfg, i, protos)
        videos.append(v)
        embeds.update(e)
    return videos, embeds


def split(dataset: Sequence[VideoSample], ratios: Sequence[float], seed: int) -> list[list[VideoSample]]:
    """Disjoint, exhaustive partition of videos by a seeded shuffle.

    Sizes use floor(ratio * n) with the remainder going to the largest
    fractional parts, earlier partitions first on ties.
    """
    if not dataset:
        raise ValueError("cannot split an empty dataset")
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be positive and sum to 1, got {list(ratios)}")
    n = len(dataset)
    exact = [r * n for r in ratios]
    sizes = [int(np.floor(x + 1e-9)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, start = [], 0
    for s in sizes:
        chosen = sorted(perm[start:start + s])
        parts.append([dataset[i] for i in chosen])
        start += s
    return parts


# ---------------------------------------------------------------- sidecar embeddings


def format_embeddings(embeds: dict[PairKey, np.ndarray], dim: int) -> str:
    lines = [f"dim {dim}"]
    for (vid, t, s, o) in sorted(embeds, key=lambda k: (k[0], k[1], k[2], k[3])):
        vec = embeds[(vid, t, s, o)]
        lines.append(f"{vid} {t} {s} {o} " + " ".join(f"{x:.9g}" for x in vec))
    return "\n".join(lines) + "\n"


def write_embeddings(path: str | Path, embeds: dict[PairKey, np.ndarray], dim: int) -> None:
    Path(path).write_text(format_embeddings(embeds, dim), encoding="utf-8")


def parse_embeddings(text: str) -> tuple[int, dict[PairKey, np.ndarray]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("dim "):
        raise ValueError("line 1: expected 'dim <d>' header")
    dim = int(lines[0].split()[1])
    out: dict[PairKey, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 4 + dim:
            raise ValueError(f"line {lineno}: expected 4 keys and {dim} values, got {len(tok)} tokens")
        try:
            key = (tok[0], int(tok[1]), int(tok[2]), int(tok[3]))
            out[key] = np.array([float(x) for x in tok[4:]])
        except ValueError:
            raise ValueError(f"line {lineno}: malformed embedding record") from None
    return dim, out


def read_embeddings(path: str | Path) -> tuple[int, dict[PairKey, np.ndarray]]:
    return parse_embeddings(Path(path).read_text(encoding="utf-8"))
