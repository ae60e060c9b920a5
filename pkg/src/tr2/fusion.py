"""Relation feature fusion: input assembly, spatial encoder, per-pair temporal
decoder and the short-term message token.

Pair-frame rows are kept in one canonical order (video, frame position,
subject id, object id). The spatial encoder sees them grouped by frame as a
padded ``[F, P, d]`` block; the temporal decoder sees them grouped by pair as a
padded ``[S, L, d]`` block. Index matrices with ``-1`` padding move rows between
the layouts through :func:`gather_rows`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .scenegraph import VideoSample

PERSON = 0


@dataclass
class FusionConfig:
    d_model: int = 64
    spatial_layers: int = 1
    temporal_layers: int = 3
    heads: int = 8
    ff_dim: int = 128
    dropout: float = 0.1
    max_temporal_positions: int = 64
    d_semantic: int = 16
    # initial scale of the attention output and second feed-forward weights;
    # small values let the input signal pass the randomly initialised blocks
    branch_init_scale: float = 0.1

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0 or self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.ff_dim <= 0 or self.max_temporal_positions <= 0 or self.d_semantic < 0:
            raise ValueError("ff_dim, max_temporal_positions must be positive")
        if self.branch_init_scale < 0:
            raise ValueError("branch_init_scale must be non-negative")


# ---------------------------------------------------------------- parameters


def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out)), np.zeros(n_out)


def init_transformer_layer(rng, prefix: str, d: int, ff: int, branch_scale: float = 1.0) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for n in ("q", "k", "v", "o"):
        out[f"{prefix}.attn.w{n}"], out[f"{prefix}.attn.b{n}"] = init_linear(rng, d, d)
    out[f"{prefix}.ff1.w"], out[f"{prefix}.ff1.b"] = init_linear(rng, d, ff)
    out[f"{prefix}.ff2.w"], out[f"{prefix}.ff2.b"] = init_linear(rng, ff, d)
    out[f"{prefix}.attn.wo"] *= branch_scale
    out[f"{prefix}.ff2.w"] *= branch_scale
    for n in ("ln1", "ln2"):
        out[f"{prefix}.{n}.g"] = np.ones(d)
        out[f"{prefix}.{n}.b"] = np.zeros(d)
    return out


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def transformer_layer(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    heads: int,
    key_padding_mask: np.ndarray | None,
    attn_mask: np.ndarray | None,
    dropout: float,
    rng: np.random.Generator | None,
    training: bool,
) -> Tensor:
    """Post-norm block: self-attention and feed-forward, each with residual and layer norm."""
    p = _sub(params, prefix)
    a = ag.multi_head_attention(x, x, x, _sub(p, "attn"), heads, key_padding_mask, attn_mask)
    x = ag.layer_norm(ag.add(x, ag.dropout(a, dropout, rng, training)), p["ln1.g"], p["ln1.b"])
    h = ag.relu(ag.linear(x, p["ff1.w"], p["ff1.b"]))
    h = ag.linear(ag.dropout(h, dropout, rng, training), p["ff2.w"], p["ff2.b"])
    return ag.layer_norm(ag.add(x, ag.dropout(h, dropout, rng, training)), p["ln2.g"], p["ln2.b"])


# ---------------------------------------------------------------- layout


@dataclass
class PairLayout:
    """Row bookkeeping for one batch of pair-frames.

    ``keys[n] = (video_pos, frame_pos, subject_id, object_id)``; ``frame_index``
    is ``[F, P]`` and ``seq_index``/``seq_pos`` are ``[S, L]``, all padded with -1.
    """
    keys: list[tuple[int, int, int, int]]
    frame_index: np.ndarray
    seq_index: np.ndarray
    seq_pos: np.ndarray
    frame_ids: list[tuple[int, int]] = field(default_factory=list)
    pair_ids: list[tuple[int, int, int]] = field(default_factory=list)
    skipped_frames: list[tuple[int, int]] = field(default_factory=list)

    @property
    def num_rows(self) -> int:
        return len(self.keys)

    def inverse_frame(self) -> np.ndarray:
        inv = np.empty(self.num_rows, dtype=np.int64)
        P = self.frame_index.shape[1]
        f, p = np.nonzero(self.frame_index >= 0)
        inv[self.frame_index[f, p]] = f * P + p
        return inv

    def inverse_seq(self) -> np.ndarray:
        inv = np.empty(self.num_rows, dtype=np.int64)
        L = self.seq_index.shape[1]
        s, l = np.nonzero(self.seq_index >= 0)
        inv[self.seq_index[s, l]] = s * L + l
        return inv


def build_layout(keys: Sequence[tuple[int, int, int, int]], frames: Sequence[tuple[int, int]] = ()) -> PairLayout:
    """Layout for rows already sorted canonically.

    ``frames`` lists every (video_pos, frame_pos) considered; those without rows
    are reported as skipped.
    """
    keys = list(keys)
    if keys != sorted(keys):
        raise ValueError("pair-frame rows must be in canonical (video, frame, subject, object) order")
    by_frame: dict[tuple[int, int], list[int]] = {}
    by_pair: dict[tuple[int, int, int], list[int]] = {}
    for n, (v, t, s, o) in enumerate(keys):
        by_frame.setdefault((v, t), []).append(n)
        by_pair.setdefault((v, s, o), []).append(n)
    frame_ids = sorted(by_frame)
    pair_ids = sorted(by_pair)
    P = max((len(r) for r in by_frame.values()), default=1)
    L = max((len(r) for r in by_pair.values()), default=1)
    fi = np.full((len(frame_ids), P), -1, dtype=np.int64)
    for i, fk in enumerate(frame_ids):
        rows = by_frame[fk]
        fi[i, :len(rows)] = rows
    si = np.full((len(pair_ids), L), -1, dtype=np.int64)
    sp = np.full((len(pair_ids), L), -1, dtype=np.int64)
    for i, pk in enumerate(pair_ids):
        rows = by_pair[pk]
        si[i, :len(rows)] = rows
        sp[i, :len(rows)] = [keys[r][1] for r in rows]
    skipped = sorted(set(frames) - set(by_frame))
    return PairLayout(keys, fi, si, sp, frame_ids, pair_ids, skipped)


# ---------------------------------------------------------------- operations


@dataclass
class AssembledInputs:
    layout: PairLayout
    raw: np.ndarray            # [N, 2*d_v + d_clip]
    subject_class: np.ndarray  # [N]
    object_class: np.ndarray   # [N]


def collect_inputs(
    videos: Sequence[VideoSample],
    embeddings: dict,
    pairs: Callable[[VideoSample, int], Sequence[tuple[int, int]]],
    entity_class: Callable[[VideoSample, int, int], int],
    d_clip: int,
) -> AssembledInputs:
    """Gather raw relation components for candidate pairs in canonical order.

    ``pairs(video, frame_pos)`` names the candidate (subject, object) ids and
    ``entity_class(video, frame_pos, instance_id)`` the class used for semantic
    embeddings. A labelled pair without a cropped-region embedding is an error;
    unlabelled candidates fall back to a zero embedding.
    """
    keys, raws, sc, oc, frames = [], [], [], [], []
    for vp, video in enumerate(videos):
        for tp, frame in enumerate(video.frames):
            frames.append((vp, tp))
            ents = {e.instance_id: e for e in frame.entities}
            labelled = frame.relation_map()
            for s, o in sorted(set(pairs(video, tp))):
                emb = embeddings.get((video.video_id, frame.frame_index, s, o))
                if emb is None:
                    if (s, o) in labelled:
                        raise KeyError(f"no cropped-region embedding for pair {(video.video_id, frame.frame_index, s, o)}")
                    emb = np.zeros(d_clip)
                keys.append((vp, tp, s, o))
                raws.append(np.concatenate([ents[s].visual_feature, ents[o].visual_feature, emb]))
                sc.append(entity_class(video, tp, s))
                oc.append(entity_class(video, tp, o))
    layout = build_layout(keys, frames)
    width = raws[0].shape[0] if raws else 0
    raw = np.array(raws) if raws else np.zeros((0, width))
    return AssembledInputs(layout, raw, np.array(sc, dtype=np.int64), np.array(oc, dtype=np.int64))


def assemble_inputs(inputs: AssembledInputs, params: dict[str, Tensor]) -> Tensor:
    """Project concat(subject visual, object visual, crop embedding, class embeddings) to d_model."""
    parts = [Tensor._wrap(inputs.raw, False)]
    if "semantic" in params:
        parts.append(ag.gather_rows(params["semantic"], inputs.subject_class))
        parts.append(ag.gather_rows(params["semantic"], inputs.object_class))
    x = ag.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return ag.linear(x, params["input.w"], params["input.b"])


def spatial_encode(
    rows: Tensor,
    layout: PairLayout,
    params: dict[str, Tensor],
    cfg: FusionConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Self-attention among the relations of each frame. No position embedding."""
    F, P = layout.frame_index.shape
    d = rows.shape[-1]
    x = ag.gather_rows(rows, layout.frame_index)
    pad = layout.frame_index < 0
    for i in range(cfg.spatial_layers):
        x = transformer_layer(x, params, f"spatial.{i}", cfg.heads, pad, None, cfg.dropout, rng, training)
    return ag.gather_rows(ag.reshape(x, (F * P, d)), layout.inverse_frame())


def rearrange_by_pair(rows: Tensor, layout: PairLayout) -> Tensor:
    """Per-frame rows to padded per-pair sequences ``[S, L, d]``."""
    return ag.gather_rows(rows, layout.seq_index)


def rearrange_by_frame(seqs: Tensor, layout: PairLayout) -> Tensor:
    """Inverse of :func:`rearrange_by_pair`: back to canonical rows."""
    S, L, d = seqs.shape
    return ag.gather_rows(ag.reshape(seqs, (S * L, d)), layout.inverse_seq())


def causal_mask(L: int) -> np.ndarray:
    return np.triu(np.ones((L, L), dtype=bool), k=1)


def temporal_decode(
    seqs: Tensor,
    positions: np.ndarray,
    params: dict[str, Tensor],
    cfg: FusionConfig,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Causal self-attention along each pair's own sequence.

    ``positions`` holds the absolute labelled-frame index of each step (-1 for
    padding); learned position embeddings are added on entry.
    """
    S, L, d = seqs.shape
    pad = positions < 0
    if L > cfg.max_temporal_positions or positions.max(initial=-1) >= cfg.max_temporal_positions:
        raise ValueError(
            f"sequence positions up to {positions.max(initial=-1)} exceed max_temporal_positions={cfg.max_temporal_positions}")
    x = ag.add(seqs, ag.gather_rows(params["temporal.pos"], positions))
    mask = causal_mask(L)
    for i in range(cfg.temporal_layers):
        x = transformer_layer(x, params, f"temporal.{i}", cfg.heads, pad, mask, cfg.dropout, rng, training)
    return x


def previous_step(seqs: Tensor) -> Tensor:
    """``out[:, l] = seqs[:, l-1]`` with zeros at ``l = 0``."""
    S, L, d = seqs.shape
    idx = np.arange(S * L).reshape(S, L) - 1
    idx[:, 0] = -1
    return ag.gather_rows(ag.reshape(seqs, (S * L, d)), idx)


def message_gate(cur: Tensor, prev: Tensor, params: dict[str, Tensor]) -> Tensor:
    """g(concat(e_f_t, e_f_{t-1})): hidden ReLU layer, then a sigmoid gate of width d_model."""
    h = ag.relu(ag.linear(ag.concat([cur, prev]), params["token.w1"], params["token.b1"]))
    return ag.sigmoid(ag.linear(h, params["token.w2"], params["token.b2"]))


def message_fuse(
    e_f: Tensor,
    params: dict[str, Tensor] | None = None,
    gate: Callable[[Tensor, Tensor], Tensor] | None = None,
) -> tuple[Tensor, Tensor]:
    """Token-augmented features ``e_r_t = concat(e_f_t, e_f_{t-1} * m_{t-1})``.

    Works on padded sequences ``[S, L, d]``. The first step of every sequence
    uses a zero previous feature, so its second half is exactly zero.
    Returns ``(e_r, m)``.
    """
    prev = previous_step(e_f)
    m = gate(e_f, prev) if gate is not None else message_gate(e_f, prev, params)
    return ag.concat([e_f, ag.mul(prev, m)]), m


def init_fusion_params(rng: np.random.Generator, cfg: FusionConfig, d_raw: int, num_classes: int,
                       spatial: bool = True, temporal: bool = True, token: bool = True) -> dict[str, np.ndarray]:
    d = cfg.d_model
    out: dict[str, np.ndarray] = {}
    if cfg.d_semantic:
        out["semantic"] = rng.normal(0.0, 0.1, size=(num_classes, cfg.d_semantic))
    out["input.w"], out["input.b"] = init_linear(rng, d_raw + 2 * cfg.d_semantic, d)
    if spatial:
        for i in range(cfg.spatial_layers):
            out.update(init_transformer_layer(rng, f"spatial.{i}", d, cfg.ff_dim, cfg.branch_init_scale))
    if temporal:
        out["temporal.pos"] = rng.normal(0.0, 0.02, size=(cfg.max_temporal_positions, d))
        for i in range(cfg.temporal_layers):
            out.update(init_transformer_layer(rng, f"temporal.{i}", d, cfg.ff_dim, cfg.branch_init_scale))
    if token:
        out["token.w1"], out["token.b1"] = init_linear(rng, 2 * d, d)
        out["token.w2"], out["token.b2"] = init_linear(rng, d, d)
    return out
