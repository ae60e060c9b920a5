"""The full relation model: fusion pipeline, classifiers, guidance heads, losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import fusion
from .autograd import Tensor
from .fusion import FusionConfig
from .guidance import (
    DEFAULT_TEMPLATE,
    EmbeddingProvider,
    adjacent_transitions,
    binary_change_loss,
    guidance_loss,
    guidance_loss_direct,
    label_set_embedding,
)
from .losses import GUIDANCE_MODES, LossBreakdown, OptimConfig, entity_loss, relation_loss, total_loss
from .metrics import Detection, FramePrediction
from .scenegraph import VideoSample, Vocabulary

PERSON = fusion.PERSON


@dataclass
class Ablation:
    guidance: str = "eq2"
    spatial: bool = True
    temporal_decoder: bool = True
    message_token: bool = True

    def __post_init__(self):
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"guidance must be one of {GUIDANCE_MODES}, got {self.guidance!r}")


@dataclass
class ModelSpec:
    vocab: Vocabulary
    d_v: int
    d_clip: int
    d_text: int
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ablation: Ablation = field(default_factory=Ablation)
    task: str = "predcls"
    entity_head_for_classes: bool = False

    @property
    def d_raw(self) -> int:
        return 2 * self.d_v + self.d_clip


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 31337])
    a = spec.ablation
    n_cls = len(spec.vocab.entity_classes)
    params = fusion.init_fusion_params(rng, spec.fusion, spec.d_raw, n_cls,
                                       a.spatial, a.temporal_decoder, a.message_token)
    d2 = 2 * spec.fusion.d_model
    params["rel.w"], params["rel.b"] = fusion.init_linear(rng, d2, spec.vocab.num_predicates)
    params["entity.w"], params["entity.b"] = fusion.init_linear(rng, spec.d_v, n_cls)
    if a.guidance in ("eq2", "eq4"):
        params["guide.w"], params["guide.b"] = fusion.init_linear(rng, d2, spec.d_text)
    elif a.guidance == "binary":
        params["binary.w"], params["binary.b"] = fusion.init_linear(rng, d2, 1)
    return params


# ---------------------------------------------------------------- batches


@dataclass
class VideoCache:
    """Per-video arrays for one task, ready to be stacked into batches."""
    video: VideoSample
    keys: list[tuple[int, int, int]]     # (frame_pos, subject, object)
    raw: np.ndarray
    subj_cls: np.ndarray
    obj_cls: np.ndarray
    labels: np.ndarray                   # [n, predicates] 0/1
    labelled: np.ndarray                 # [n] bool
    targets: np.ndarray | None           # [n, d_text] sentence embeddings (labelled rows)
    entity_feat: np.ndarray              # [m, d_v]
    entity_cls: np.ndarray               # [m]
    frame_count: int


@dataclass
class Batch:
    videos: list[VideoSample]
    inputs: fusion.AssembledInputs
    labels: np.ndarray
    labelled: np.ndarray
    targets: np.ndarray | None
    transitions: np.ndarray
    changed: np.ndarray
    entity_feat: np.ndarray
    entity_cls: np.ndarray


def entity_distribution(spec: ModelSpec, params: dict[str, Tensor] | None, entity) -> np.ndarray:
    n_cls = len(spec.vocab.entity_classes)
    if spec.entity_head_for_classes and params is not None:
        logits = entity.visual_feature @ params["entity.w"].data + params["entity.b"].data
        e = np.exp(logits - logits.max())
        return e / e.sum()
    return entity.scores(n_cls)


def frame_detections(spec: ModelSpec, params, frame) -> dict[int, Detection]:
    """What the model knows about each entity under the spec's task."""
    out = {}
    for e in frame.entities:
        if spec.task == "predcls":
            out[e.instance_id] = Detection(e.instance_id, e.class_id, 1.0, e.box)
        else:
            dist = entity_distribution(spec, params, e)
            c = int(np.argmax(dist))
            box = e.box if spec.task == "sgcls" else e.detected_box
            out[e.instance_id] = Detection(e.instance_id, c, float(dist[c]), box)
    return out


def candidate_pairs(spec: ModelSpec, frame, dets: dict[int, Detection], training: bool) -> list[tuple[int, int]]:
    if training or spec.task != "sgdet":
        return sorted(frame.relation_map())
    subjects = [i for i, d in dets.items() if d.class_id == PERSON]
    return sorted((s, o) for s in subjects for o in dets if o != s)


def build_cache(video: VideoSample, embeddings: dict, spec: ModelSpec, params=None, training: bool = True,
                provider: EmbeddingProvider | None = None, template: str = DEFAULT_TEMPLATE,
                sentence_cache: dict | None = None) -> VideoCache:
    n_pred = spec.vocab.num_predicates
    names = spec.vocab.entity_classes
    dets_by_frame = [frame_detections(spec, params, f) for f in video.frames]

    def pairs(v, tp):
        return candidate_pairs(spec, v.frames[tp], dets_by_frame[tp], training)

    def cls(v, tp, iid):
        return dets_by_frame[tp][iid].class_id

    inputs = fusion.collect_inputs([video], embeddings, pairs, cls, spec.d_clip)
    keys = [(t, s, o) for (_, t, s, o) in inputs.layout.keys]
    n = len(keys)
    labels = np.zeros((n, n_pred))
    labelled = np.zeros(n, dtype=bool)
    targets = np.zeros((n, provider.dim)) if provider is not None else None
    cache = sentence_cache if sentence_cache is not None else {}
    for r, (t, s, o) in enumerate(keys):
        frame = video.frames[t]
        lab = frame.relation_map().get((s, o))
        if not lab:
            continue
        labelled[r] = True
        labels[r, sorted(lab)] = 1.0
        if provider is not None:
            sc, oc = frame.entity(s).class_id, frame.entity(o).class_id
            key = (sc, oc, frozenset(lab))
            if key not in cache:
                cache[key] = label_set_embedding(names[sc], names[oc], lab, spec.vocab, provider, template)
            targets[r] = cache[key]
    ents = [e for f in video.frames for e in f.entities]
    feat = np.array([e.visual_feature for e in ents]) if ents else np.zeros((0, spec.d_v))
    ecls = np.array([e.class_id for e in ents], dtype=np.int64)
    return VideoCache(video, keys, inputs.raw, inputs.subject_class, inputs.object_class, labels, labelled,
                      targets, feat, ecls, video.T)


def stack(caches: Sequence[VideoCache]) -> Batch:
    keys, frames = [], []
    for vp, c in enumerate(caches):
        keys.extend((vp, t, s, o) for (t, s, o) in c.keys)
        frames.extend((vp, t) for t in range(c.frame_count))
    layout = fusion.build_layout(keys, frames)
    width = caches[0].raw.shape[1] if caches else 0
    raw = np.concatenate([c.raw for c in caches]) if keys else np.zeros((0, width))
    inputs = fusion.AssembledInputs(layout, raw,
                                    np.concatenate([c.subj_cls for c in caches]),
                                    np.concatenate([c.obj_cls for c in caches]))
    labels = np.concatenate([c.labels for c in caches])
    labelled = np.concatenate([c.labelled for c in caches])
    targets = None
    if caches and caches[0].targets is not None:
        targets = np.concatenate([c.targets for c in caches])
    transitions = adjacent_transitions(keys, labelled)
    changed = np.array([float(np.any(labels[a] != labels[b])) for a, b in transitions])
    return Batch([c.video for c in caches], inputs, labels, labelled, targets, transitions, changed,
                 np.concatenate([c.entity_feat for c in caches]),
                 np.concatenate([c.entity_cls for c in caches]))


# ---------------------------------------------------------------- forward


@dataclass
class Outputs:
    e_f: Tensor       # rows [N, d]
    e_r: Tensor       # rows [N, 2d]
    logits: Tensor    # rows [N, predicates]
    gate: Tensor | None


def forward(spec: ModelSpec, params: dict[str, Tensor], batch: Batch, training: bool = False,
            rng: np.random.Generator | None = None) -> Outputs:
    cfg = spec.fusion
    a = spec.ablation
    layout = batch.inputs.layout
    x = fusion.assemble_inputs(batch.inputs, params)
    if a.spatial:
        x = fusion.spatial_encode(x, layout, params, cfg, rng, training)
    seqs = fusion.rearrange_by_pair(x, layout)
    if a.temporal_decoder:
        seqs = fusion.temporal_decode(seqs, layout.seq_pos, params, cfg, rng, training)
    gate = None
    if a.message_token:
        e_r_seq, gate = fusion.message_fuse(seqs, params)
    else:
        S, L, d = seqs.shape
        e_r_seq = ag.concat([seqs, Tensor._wrap(np.zeros((S, L, d)), False)])
    e_f = fusion.rearrange_by_frame(seqs, layout)
    e_r = fusion.rearrange_by_frame(e_r_seq, layout)
    logits = ag.linear(e_r, params["rel.w"], params["rel.b"])
    return Outputs(e_f, e_r, logits, gate)


def objective(spec: ModelSpec, params: dict[str, Tensor], batch: Batch, optim: OptimConfig,
              training: bool = False, rng=None) -> tuple[Tensor, LossBreakdown]:
    out = forward(spec, params, batch, training, rng)
    rows = np.flatnonzero(batch.labelled)
    l_rel = relation_loss(ag.gather_rows(out.logits, rows), batch.labels[rows],
                          optim.focal_gamma, optim.focal_alpha)
    lam = optim.lam(spec.task)
    ent_logits = ag.linear(Tensor._wrap(batch.entity_feat, False), params["entity.w"], params["entity.b"])
    l_obj = entity_loss(ent_logits, batch.entity_cls).value
    mode = spec.ablation.guidance
    l_g = None
    if mode == "eq2":
        l_g = guidance_loss(out.e_r, batch.targets, batch.transitions, params["guide.w"], params["guide.b"]).value
    elif mode == "eq4":
        l_g = guidance_loss_direct(out.e_r, batch.targets, rows, params["guide.w"], params["guide.b"]).value
    elif mode == "binary":
        l_g = binary_change_loss(out.e_r, batch.transitions, batch.changed,
                                 params["binary.w"], params["binary.b"]).value
    return total_loss(l_obj, l_rel, l_g, lam, mode)


def predict(spec: ModelSpec, params: dict[str, Tensor], batch: Batch) -> list[list[FramePrediction]]:
    """Per video, per frame: candidate pairs with sigmoid predicate scores."""
    out = forward(spec, params, batch, training=False)
    scores = 1.0 / (1.0 + np.exp(-out.logits.data))
    layout = batch.inputs.layout
    rows_by_frame: dict[tuple[int, int], list[int]] = {}
    for n, (vp, t, s, o) in enumerate(layout.keys):
        rows_by_frame.setdefault((vp, t), []).append(n)
    n_pred = spec.vocab.num_predicates
    result = []
    for vp, video in enumerate(batch.videos):
        per_frame = []
        for t, frame in enumerate(video.frames):
            dets = frame_detections(spec, params, frame)
            rows = rows_by_frame.get((vp, t), [])
            pairs = [(dets[layout.keys[n][2]], dets[layout.keys[n][3]]) for n in rows]
            per_frame.append(FramePrediction(pairs, scores[rows] if rows else np.zeros((0, n_pred))))
        result.append(per_frame)
    return result
