"""Frame-level scene graph types, box geometry, change degree and dataset files."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CATEGORIES = ("attention", "spatial", "contacting")

ENTITY_NAMES = (
    "person", "bag", "bed", "blanket", "book", "box", "broom", "chair", "cabinet",
    "clothes", "cup", "dish", "door", "doorknob", "doorway", "floor", "food",
    "groceries", "laptop", "light", "medicine", "mirror", "notebook", "phone",
    "picture", "pillow", "refrigerator", "sandwich", "shelf", "shoe", "sofa",
    "table", "television", "towel", "vacuum", "window",
)

# (name, surface form used in prompts, category)
PREDICATES = (
    ("looking_at", "looking at", "attention"),
    ("not_looking_at", "not looking at", "attention"),
    ("unsure", "unsure about", "attention"),
    ("above", "above", "spatial"),
    ("beneath", "beneath", "spatial"),
    ("in_front_of", "in front of", "spatial"),
    ("behind", "behind", "spatial"),
    ("on_the_side_of", "on the side of", "spatial"),
    ("in", "in", "spatial"),
    ("carrying", "carrying", "contacting"),
    ("covered_by", "covered by", "contacting"),
    ("drinking_from", "drinking from", "contacting"),
    ("eating", "eating", "contacting"),
    ("have_it_on_the_back", "having on the back", "contacting"),
    ("holding", "holding", "contacting"),
    ("leaning_on", "leaning on", "contacting"),
    ("lying_on", "lying on", "contacting"),
    ("not_contacting", "not contacting", "contacting"),
    ("other_relationship", "otherwise related to", "contacting"),
    ("sitting_on", "sitting on", "contacting"),
    ("standing_on", "standing on", "contacting"),
    ("touching", "touching", "contacting"),
    ("twisting", "twisting", "contacting"),
    ("wearing", "wearing", "contacting"),
    ("wiping", "wiping", "contacting"),
    ("writing_on", "writing on", "contacting"),
)


@dataclass(frozen=True)
class Predicate:
    name: str
    surface_form: str
    category: str


@dataclass(frozen=True)
class Vocabulary:
    entity_classes: tuple[str, ...]
    predicate_classes: tuple[Predicate, ...]

    def __post_init__(self):
        if len(set(self.entity_classes)) != len(self.entity_classes):
            raise ValueError("duplicate entity class names")
        names = [p.name for p in self.predicate_classes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate predicate names")
        for p in self.predicate_classes:
            if not p.surface_form.strip():
                raise ValueError(f"predicate {p.name!r} has an empty surface form")
            if p.category not in CATEGORIES:
                raise ValueError(f"predicate {p.name!r} has unknown category {p.category!r}")

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(ENTITY_NAMES, tuple(Predicate(*p) for p in PREDICATES))

    @classmethod
    def build(cls, entity_count: int, partition: Sequence[int]) -> "Vocabulary":
        """Vocabulary with ``entity_count`` classes and ``partition`` predicates per category.

        Uses the default names where they exist and numbered fillers beyond.
        """
        if len(partition) != len(CATEGORIES) or any(n < 0 for n in partition) or sum(partition) == 0:
            raise ValueError(f"partition needs three non-negative sizes, got {list(partition)}")
        ents = tuple(ENTITY_NAMES[i] if i < len(ENTITY_NAMES) else f"thing{i}" for i in range(entity_count))
        preds: list[Predicate] = []
        for cat, n in zip(CATEGORIES, partition):
            pool = [Predicate(*p) for p in PREDICATES if p[2] == cat]
            for j in range(n):
                if j < len(pool):
                    preds.append(pool[j])
                else:
                    preds.append(Predicate(f"{cat}_{j}", f"{cat} relation {j} with", cat))
        return cls(ents, tuple(preds))

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_classes)

    def category_ids(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {c: [] for c in CATEGORIES}
        for i, p in enumerate(self.predicate_classes):
            out[p.category].append(i)
        return {c: ids for c, ids in out.items() if ids}

    def category_of(self) -> np.ndarray:
        """Category index (into CATEGORIES) of each predicate id."""
        return np.array([CATEGORIES.index(p.category) for p in self.predicate_classes], dtype=np.int64)


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if min(self.x1, self.y1) < 0.0 or max(self.x2, self.y2) > 1.0:
            raise ValueError(f"box {self.as_tuple()} outside the unit square")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    return BoundingBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    if inter <= 0.0:  # underflow on vanishing boxes
        return 0.0
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class EntityInstance:
    """One entity in one frame.

    ``box`` and ``class_id`` are ground truth. ``class_scores`` and ``det_box`` are
    what the detector reports for the same instance; both default to the ground
    truth when no detection was recorded.
    """
    instance_id: int
    class_id: int
    box: BoundingBox
    visual_feature: np.ndarray = field(repr=False)
    class_scores: np.ndarray | None = field(default=None, repr=False)
    det_box: BoundingBox | None = None

    def __post_init__(self):
        if self.class_scores is not None:
            s = self.class_scores
            if np.any(s < 0) or abs(float(s.sum()) - 1.0) > 1e-9:
                raise ValueError(f"class_scores of instance {self.instance_id} are not a distribution")

    def scores(self, num_classes: int) -> np.ndarray:
        if self.class_scores is not None:
            return self.class_scores
        out = np.zeros(num_classes)
        out[self.class_id] = 1.0
        return out

    @property
    def detected_box(self) -> BoundingBox:
        return self.det_box if self.det_box is not None else self.box

    def __eq__(self, other):
        if not isinstance(other, EntityInstance):
            return NotImplemented
        same_scores = (self.class_scores is None and other.class_scores is None) or (
            self.class_scores is not None and other.class_scores is not None
            and np.array_equal(self.class_scores, other.class_scores))
        return (self.instance_id == other.instance_id and self.class_id == other.class_id
                and self.box == other.box and self.det_box == other.det_box
                and np.array_equal(self.visual_feature, other.visual_feature) and same_scores)

    __hash__ = None


@dataclass(frozen=True)
class RelationEdge:
    subject_id: int
    object_id: int
    labels: frozenset[int]

    def __post_init__(self):
        if self.subject_id == self.object_id:
            raise ValueError(f"self-relation on instance {self.subject_id}")
        if not self.labels:
            raise ValueError(f"edge ({self.subject_id}, {self.object_id}) has no labels")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.subject_id, self.object_id)


@dataclass(frozen=True)
class FrameGraph:
    frame_index: int
    entities: tuple[EntityInstance, ...]
    edges: tuple[RelationEdge, ...]

    def __post_init__(self):
        ids = [e.instance_id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_index}: duplicate instance ids")
        known = set(ids)
        pairs = set()
        for e in self.edges:
            if e.subject_id not in known or e.object_id not in known:
                raise ValueError(f"frame {self.frame_index}: edge {e.pair} references a missing instance")
            if e.pair in pairs:
                raise ValueError(f"frame {self.frame_index}: duplicate edge {e.pair}")
            pairs.add(e.pair)

    def entity(self, instance_id: int) -> EntityInstance:
        for e in self.entities:
            if e.instance_id == instance_id:
                return e
        raise KeyError(instance_id)

    def relation_map(self) -> dict[tuple[int, int], frozenset[int]]:
        return {e.pair: e.labels for e in self.edges}


@dataclass(frozen=True)
class VideoSample:
    video_id: str
    frames: tuple[FrameGraph, ...]

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"video {self.video_id} has no frames")
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"video {self.video_id}: frame indices not strictly increasing")
        if any(c.isspace() for c in self.video_id) or not self.video_id:
            raise ValueError(f"video id {self.video_id!r} must be a non-empty token")
        classes: dict[int, int] = {}
        for f in self.frames:
            for e in f.entities:
                if classes.setdefault(e.instance_id, e.class_id) != e.class_id:
                    raise ValueError(f"video {self.video_id}: instance {e.instance_id} changes class")

    @property
    def T(self) -> int:
        return len(self.frames)


def transition_changed(prev: FrameGraph, cur: FrameGraph) -> bool:
    return prev.relation_map() != cur.relation_map()


def change_degree(video: VideoSample) -> float:
    """Fraction of adjacent frame transitions whose labelled relations differ.

    A pair appearing or disappearing counts as a change, as does a label-set change.
    """
    if video.T == 1:
        return 0.0
    changed = sum(transition_changed(a, b) for a, b in zip(video.frames, video.frames[1:]))
    return changed / (video.T - 1)


# ---------------------------------------------------------------- dataset file


class DatasetFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def quantize(a) -> np.ndarray:
    """Round to the 9 significant digits the dataset format stores."""
    arr = np.asarray(a, dtype=np.float64)
    return np.array([float(_fmt(v)) for v in arr.reshape(-1)]).reshape(arr.shape)


def format_dataset(videos: Iterable[VideoSample]) -> str:
    lines: list[str] = []
    for v in videos:
        lines.append(f"#video {v.video_id} {v.T}")
        for f in v.frames:
            lines.append(f"#frame {f.frame_index}")
            for e in f.entities:
                nums = " ".join(_fmt(x) for x in (*e.box.as_tuple(), *e.visual_feature))
                lines.append(f"E {e.instance_id} {e.class_id} {nums}")
                if e.class_scores is not None or e.det_box is not None:
                    db = e.detected_box.as_tuple()
                    sc = e.class_scores if e.class_scores is not None else np.array([])
                    lines.append("D " + " ".join([str(e.instance_id)] + [_fmt(x) for x in (*db, *sc)]))
            for r in f.edges:
                labels = ",".join(str(p) for p in sorted(r.labels))
                lines.append(f"R {r.subject_id} {r.object_id} {labels}")
    return "\n".join(lines) + "\n"


def write_dataset(path: str | Path, videos: Iterable[VideoSample]) -> None:
    Path(path).write_text(format_dataset(videos), encoding="utf-8")


def parse_dataset(text: str, num_classes: int | None = None) -> list[VideoSample]:
    """Parse the line-oriented dataset format.

    ``D <id> <x1> <y1> <x2> <y2> <scores...>`` lines are optional detector
    records for the preceding entity lines of the same frame.
    """
    videos: list[VideoSample] = []
    vid: str | None = None
    declared_T = 0
    frames: list[FrameGraph] = []
    fidx: int | None = None
    ents: dict[int, dict] = {}
    edges: list[RelationEdge] = []
    frame_line = 0

    def close_frame():
        nonlocal fidx, ents, edges
        if fidx is None:
            return
        try:
            entities = tuple(
                EntityInstance(i, d["cls"], d["box"], d["feat"], d.get("scores"), d.get("det"))
                for i, d in ents.items())
            frames.append(FrameGraph(fidx, entities, tuple(edges)))
        except ValueError as exc:
            raise DatasetFormatError(frame_line, str(exc)) from None
        fidx, ents, edges = None, {}, []

    def close_video(lineno: int):
        nonlocal vid, frames
        close_frame()
        if vid is None:
            return
        if len(frames) != declared_T:
            raise DatasetFormatError(lineno, f"video {vid} declares {declared_T} frames, found {len(frames)}")
        try:
            videos.append(VideoSample(vid, tuple(frames)))
        except ValueError as exc:
            raise DatasetFormatError(lineno, str(exc)) from None
        vid, frames = None, []

    def floats(tokens, lineno):
        try:
            return [float(t) for t in tokens]
        except ValueError:
            raise DatasetFormatError(lineno, "expected numbers") from None

    def box(vals, lineno):
        try:
            return BoundingBox(*vals)
        except ValueError as exc:
            raise DatasetFormatError(lineno, str(exc)) from None

    lines = text.splitlines()
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        tok = line.split()
        head = tok[0]
        if head == "#video":
            close_video(lineno)
            if len(tok) != 3 or not tok[2].isdigit():
                raise DatasetFormatError(lineno, "expected '#video <id> <T>'")
            vid, declared_T = tok[1], int(tok[2])
        elif head == "#frame":
            if vid is None:
                raise DatasetFormatError(lineno, "frame outside a video")
            close_frame()
            if len(tok) != 2:
                raise DatasetFormatError(lineno, "expected '#frame <t>'")
            try:
                fidx = int(tok[1])
            except ValueError:
                raise DatasetFormatError(lineno, "frame index must be an integer") from None
            frame_line = lineno
        elif head == "E":
            if fidx is None:
                raise DatasetFormatError(lineno, "entity outside a frame")
            if len(tok) < 7:
                raise DatasetFormatError(lineno, "entity line needs id, class and four box coordinates")
            try:
                iid, cls = int(tok[1]), int(tok[2])
            except ValueError:
                raise DatasetFormatError(lineno, "instance and class ids must be integers") from None
            if iid in ents:
                raise DatasetFormatError(lineno, f"duplicate instance {iid}")
            vals = floats(tok[3:], lineno)
            if num_classes is not None and not 0 <= cls < num_classes:
                raise DatasetFormatError(lineno, f"class id {cls} out of range")
            ents[iid] = {"cls": cls, "box": box(vals[:4], lineno), "feat": np.array(vals[4:])}
        elif head == "D":
            if fidx is None or len(tok) < 6:
                raise DatasetFormatError(lineno, "malformed detection line")
            try:
                iid = int(tok[1])
            except ValueError:
                raise DatasetFormatError(lineno, "instance id must be an integer") from None
            if iid not in ents:
                raise DatasetFormatError(lineno, f"detection for unknown instance {iid}")
            vals = floats(tok[2:], lineno)
            ents[iid]["det"] = box(vals[:4], lineno)
            if len(vals) > 4:
                ents[iid]["scores"] = np.array(vals[4:])
        elif head == "R":
            if fidx is None or len(tok) != 4:
                raise DatasetFormatError(lineno, "expected 'R <subj> <obj> <p,p,...>'")
            try:
                s, o = int(tok[1]), int(tok[2])
                labels = frozenset(int(p) for p in tok[3].split(","))
                edges.append(RelationEdge(s, o, labels))
            except ValueError as exc:
                raise DatasetFormatError(lineno, f"bad relation: {exc}") from None
        else:
            raise DatasetFormatError(lineno, f"unknown record {head!r}")
    close_video(len(lines) + 1)
    return videos


def read_dataset(path: str | Path, num_classes: int | None = None) -> list[VideoSample]:
    return parse_dataset(Path(path).read_text(encoding="utf-8"), num_classes)
