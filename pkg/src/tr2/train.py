"""Training loop, evaluation driver, ablation matrix and gradient check."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .autograd import Tape, Tensor, finite_diff_check, GradCheckReport
from .config import ConfigError, RunConfig
from .fusion import FusionConfig
from .guidance import FileProvider, StubProvider
from .losses import AdamWState, LossBreakdown, OptimConfig, optimizer_step
from .metrics import (
    STRATEGIES,
    EvalConfig,
    RecallReport,
    frame_ground_truth,
    frame_recalls,
    mean_recall,
)
from .model import Ablation, ModelSpec, build_cache, init_params, objective, predict, stack
from .scenegraph import VideoSample, read_dataset
from .synth import GenConfig, generate, read_embeddings, split

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: dict[str, float]
    val_recall: dict[str, float] = field(default_factory=dict)


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    epochs: list[EpochRecord] = field(default_factory=list)
    wall_time: float = 0.0
    label: str = ""
    selected_epoch: int = -1

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        d["epochs"] = [EpochRecord(**e) for e in d["epochs"]]
        return cls(**d)


def check_consistency(cfg: RunConfig) -> None:
    if cfg.fusion.max_temporal_positions < cfg.gen.frames_per_video:
        raise ConfigError("fusion.max_temporal_positions is shorter than gen.frames_per_video")


def make_provider(cfg: RunConfig):
    if cfg.provider == "file":
        return FileProvider.load(cfg.embedding_table)
    return StubProvider(cfg.text_dim)


def make_spec(cfg: RunConfig, d_v: int, d_clip: int, d_text: int) -> ModelSpec:
    lam = cfg.optim.lam(cfg.task)
    return ModelSpec(cfg.gen.vocabulary, d_v, d_clip, d_text, cfg.fusion, cfg.ablation, cfg.task,
                     entity_head_for_classes=cfg.task != "predcls" and lam > 0)


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def train(cfg: RunConfig, train_videos: Sequence[VideoSample], embeddings: dict,
          val_videos: Sequence[VideoSample] = (), eval_every: int = 0,
          init: dict[str, np.ndarray] | None = None) -> tuple[dict[str, np.ndarray], RunRecord]:
    """Train from scratch (or from ``init``); returns final parameters and the run record.

    Identical config, seed and data give bit-identical parameters.
    """
    check_consistency(cfg)
    start = time.perf_counter()
    provider = make_provider(cfg) if cfg.ablation.guidance in ("eq2", "eq4") else None
    d_text = provider.dim if provider is not None else cfg.text_dim
    d_v = train_videos[0].frames[0].entities[0].visual_feature.shape[0]
    d_clip = next(iter(embeddings.values())).shape[0]
    spec = make_spec(cfg, d_v, d_clip, d_text)
    raw = init if init is not None else init_params(spec, cfg.seed)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
    sentence_cache: dict = {}
    caches = [build_cache(v, embeddings, spec, params, True, provider, cfg.template, sentence_cache)
              for v in train_videos]
    state = AdamWState()
    record = RunRecord(cfg.seed, cfg.hash())
    key = f"R@{cfg.eval.Ks[0]}"
    best, best_score = None, -1.0
    for epoch in range(cfg.epochs):
        sums = {"obj": 0.0, "rel": 0.0, "guidance": 0.0, "total": 0.0}
        chunks = _batches(len(caches), cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))
        for step, chunk in enumerate(chunks):
            batch = stack([caches[i] for i in chunk])
            rng = np.random.default_rng([cfg.seed, epoch, step, 1])
            with Tape() as tape:
                loss, br = objective(spec, params, batch, cfg.optim, training=True, rng=rng)
            if not np.isfinite(br.total):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}")
            grads = tape.backward(loss, wrt=list(params.values()))
            optimizer_step({k: p.data for k, p in params.items()},
                           {k: grads[p] for k, p in params.items()}, state, cfg.optim)
            for k in sums:
                sums[k] += getattr(br, k)
        ep = EpochRecord(epoch, {k: v / max(len(chunks), 1) for k, v in sums.items()})
        if val_videos and eval_every and (epoch + 1) % eval_every == 0:
            rep = evaluate(cfg, {k: p.data for k, p in params.items()}, val_videos, embeddings,
                           strategies=("with_constraints",))[0]
            ep.val_recall = {f"R@{k}": rep.get(cfg.task, "with_constraints", k) for k in cfg.eval.Ks}
            if cfg.select_best and ep.val_recall[key] > best_score:
                best_score, record.selected_epoch = ep.val_recall[key], epoch
                best = {k: p.data.copy() for k, p in params.items()}
        record.epochs.append(ep)
        log.info("epoch %d loss %s %s", epoch, ep.loss, ep.val_recall)
    record.wall_time = time.perf_counter() - start
    if best is not None:
        return best, record
    if cfg.select_best:
        log.warning("select_best set without validation videos or eval_every; keeping the last epoch")
    record.selected_epoch = cfg.epochs - 1
    return {k: p.data.copy() for k, p in params.items()}, record


def evaluate(cfg: RunConfig, params_np: dict[str, np.ndarray], videos: Sequence[VideoSample], embeddings: dict,
             strategies: Sequence[str] = STRATEGIES, chunk: int = 25,
             ) -> tuple[RecallReport, dict[str, dict[str, list]]]:
    """Recall report over ``videos`` plus per-strategy, per-video frame recalls."""
    d_v = videos[0].frames[0].entities[0].visual_feature.shape[0]
    d_clip = next(iter(embeddings.values())).shape[0]
    d_text = params_np["guide.w"].shape[1] if "guide.w" in params_np else cfg.text_dim
    spec = make_spec(cfg, d_v, d_clip, d_text)
    params = {k: Tensor._wrap(v, False) for k, v in params_np.items()}
    category_of = spec.vocab.category_of()
    preds: list[list] = []
    for i in range(0, len(videos), chunk):
        caches = [build_cache(v, embeddings, spec, params, training=False) for v in videos[i:i + chunk]]
        preds.extend(predict(spec, params, stack(caches)))
    gts = [[frame_ground_truth(f) for f in v.frames] for v in videos]
    report = RecallReport()
    per_video: dict[str, dict[str, list]] = {}
    for strategy in strategies:
        ecfg = dataclasses.replace(cfg.eval, strategy=strategy, task=cfg.task)
        per_video[strategy] = {}
        pooled = []
        for v, p, g in zip(videos, preds, gts):
            fr = frame_recalls(p, g, ecfg, category_of)
            per_video[strategy][v.video_id] = fr
            pooled.extend(fr)
        for K, val in mean_recall(pooled, ecfg.Ks).items():
            report.values[(cfg.task, strategy, K)] = val
        report.frames[(cfg.task, strategy)] = sum(r is not None for r in pooled)
    return report, per_video


# ---------------------------------------------------------------- data plumbing


def load_data(data_dir: str | Path) -> tuple[list[VideoSample], dict]:
    d = Path(data_dir)
    videos = read_dataset(d / "dataset.txt")
    _, emb = read_embeddings(d / "embeddings.txt")
    return videos, emb


def synthesize(gen: GenConfig) -> tuple[list[VideoSample], dict]:
    return generate(gen)


def partition(cfg: RunConfig, videos: Sequence[VideoSample]):
    parts = split(videos, cfg.split, cfg.split_seed)
    while len(parts) < 3:
        parts.append([])
    return parts[0], parts[1], parts[2]


# ---------------------------------------------------------------- ablations


TABLE4_ROWS = (
    ("base", dict(spatial=False, temporal_decoder=False, message_token=False)),
    ("temporal", dict(spatial=False, temporal_decoder=True, message_token=True)),
    ("spatial", dict(spatial=True, temporal_decoder=False, message_token=False)),
    ("spatial+decoder", dict(spatial=True, temporal_decoder=True, message_token=False)),
    ("spatial+token", dict(spatial=True, temporal_decoder=False, message_token=True)),
    ("spatial+decoder+token", dict(spatial=True, temporal_decoder=True, message_token=True)),
)

FIG4_ROWS = (
    ("TR2-", dict(guidance="none")),
    ("TR2bin", dict(guidance="binary")),
    ("TR2", dict(guidance="eq2")),
)

TABLE3_ROWS = (
    ("direct", dict(guidance="eq4")),
    ("difference", dict(guidance="eq2")),
)


@dataclass
class AblationRow:
    name: str
    ablation: Ablation
    recalls: dict[int, list[float]]
    strata: list = field(default_factory=list)

    def mean(self, K: int) -> float:
        return float(np.mean(self.recalls[K]))


def ablate(base: RunConfig, variants: Sequence[tuple[str, dict]], seeds: Sequence[int],
           train_videos, test_videos, embeddings, keep_per_video: bool = False,
           val_videos: Sequence[VideoSample] = ()) -> list[AblationRow]:
    """Train every variant under each seed and collect held-out With-Constraints recall.

    With ``base.select_best`` the epoch is chosen on ``val_videos``, evaluated after every epoch.
    """
    rows = []
    for name, flags in variants:
        abl = dataclasses.replace(base.ablation, **flags)
        row = AblationRow(name, abl, {K: [] for K in base.eval.Ks})
        for seed in seeds:
            cfg = dataclasses.replace(base, ablation=abl, seed=seed)
            params, _ = train(cfg, train_videos, embeddings, val_videos, eval_every=1 if cfg.select_best else 0)
            rep, per_video = evaluate(cfg, params, test_videos, embeddings, strategies=("with_constraints",))
            for K in base.eval.Ks:
                row.recalls[K].append(rep.get(cfg.task, "with_constraints", K))
            if keep_per_video:
                row.strata.append(per_video["with_constraints"])
            log.info("variant %s seed %d R@%d=%.4f", name, seed, base.eval.Ks[0], row.recalls[base.eval.Ks[0]][-1])
        rows.append(row)
    return rows


def format_ablation_table(rows: Sequence[AblationRow], Ks: Sequence[int]) -> str:
    """CSV in the paper's ablation-table layout; deltas against the first row."""
    head = ["variant", "guidance", "spatial", "temporal_decoder", "message_token"]
    head += [f"R@{k}" for k in Ks] + [f"delta_R@{k}" for k in Ks]
    lines = [",".join(head)]
    base = rows[0]
    for r in rows:
        a = r.ablation
        cells = [r.name, a.guidance, str(a.spatial).lower(), str(a.temporal_decoder).lower(),
                 str(a.message_token).lower()]
        cells += [f"{r.mean(k):.6f}" for k in Ks]
        cells += [f"{r.mean(k) - base.mean(k):+.6f}" for k in Ks]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- gradient check


def toy_config(guidance: str = "eq2", task: str = "predcls", lam: float | None = 1.0) -> RunConfig:
    gen = GenConfig(seed=3, num_videos=1, frames_per_video=3, pairs_per_frame=2, entity_class_count=4,
                    predicate_partition=(2, 2, 2), change_rate=0.5, d_v=3, d_clip=4)
    fusion = FusionConfig(d_model=8, spatial_layers=1, temporal_layers=1, heads=2, ff_dim=8, dropout=0.0,
                          max_temporal_positions=4, d_semantic=2)
    optim = OptimConfig(entity_weight=lam)
    return RunConfig(gen=gen, fusion=fusion, optim=optim, ablation=Ablation(guidance=guidance),
                     task=task, text_dim=5, epochs=1, batch_size=1)


@dataclass
class GradcheckResult:
    reports: dict[str, GradCheckReport]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())

    @property
    def worst(self) -> tuple[str, str, float]:
        name, rep = max(self.reports.items(), key=lambda kv: kv[1].max_rel_error)
        return name, rep.worst or "", rep.max_rel_error


def gradcheck(cfg: RunConfig | None = None, guidance_modes: Sequence[str] = ("eq2", "eq4", "binary"),
              tolerance: float = 1e-4, step: float = 1e-5) -> GradcheckResult:
    """Finite-difference check of the full objective for each guidance mode on toy dimensions."""
    start = time.perf_counter()
    reports = {}
    for mode in guidance_modes:
        c = dataclasses.replace(cfg or toy_config(), ablation=dataclasses.replace(
            (cfg or toy_config()).ablation, guidance=mode))
        c.fusion = dataclasses.replace(c.fusion, dropout=0.0)
        videos, emb = generate(c.gen)
        provider = make_provider(c) if mode in ("eq2", "eq4") else None
        d_text = provider.dim if provider is not None else c.text_dim
        spec = make_spec(c, c.gen.d_v, c.gen.d_clip, d_text)
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in init_params(spec, c.seed).items()}
        batch = stack([build_cache(v, emb, spec, params, True, provider, c.template) for v in videos])

        def f():
            return objective(spec, params, batch, c.optim, training=False)[0]

        reports[mode] = finite_diff_check(f, params, step=step, tolerance=tolerance)
    return GradcheckResult(reports, time.perf_counter() - start)


def save_run(out_dir: str | Path, params: dict[str, np.ndarray], record: RunRecord) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "checkpoint.bin", params)
    (out / "run_record.json").write_text(record.to_json() + "\n", encoding="utf-8")


def loss_breakdown_dict(br: LossBreakdown) -> dict[str, float]:
    return dataclasses.asdict(br)
