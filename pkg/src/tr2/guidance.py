"""Cross-modality guidance from prompted relation sentences.

The text encoder is pluggable: :class:`StubProvider` hashes a sentence to a
pseudo-random unit vector, :class:`FileProvider` looks sentences up in a table
produced offline (e.g. by a pretrained vision-and-language text encoder).
"""
from __future__ import annotations

import hashlib
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .scenegraph import FrameGraph, Vocabulary

DEFAULT_TEMPLATE = "a photo of a {subject} {predicate} a {object}"
SLOTS = ("{subject}", "{predicate}", "{object}")


@dataclass(frozen=True)
class PromptTemplate:
    pattern: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        for slot in SLOTS:
            if self.pattern.count(slot) != 1:
                raise ValueError(f"template must contain {slot} exactly once: {self.pattern!r}")


def build_prompt(template: PromptTemplate | str, subject: str, predicate: str, obj: str) -> str:
    if isinstance(template, str):
        template = PromptTemplate(template)
    for slot, value in zip(SLOTS, (subject, predicate, obj)):
        if not value or not value.strip():
            raise ValueError(f"empty value for {slot}")
    text = (template.pattern.replace("{subject}", subject)
            .replace("{predicate}", predicate).replace("{object}", obj))
    return re.sub(r"\s+", " ", text.replace("_", " ")).strip().lower()


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    source: str


class EmbeddingProvider(Protocol):
    dim: int
    source: str

    def embed(self, sentence: str) -> np.ndarray: ...


class StubProvider:
    """Deterministic unit vectors seeded by the SHA-256 of the sentence."""

    source = "stub"

    def __init__(self, dim: int = 512):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, sentence: str) -> np.ndarray:
        vec = self._cache.get(sentence)
        if vec is None:
            digest = hashlib.sha256(sentence.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.normal(size=self.dim)
            vec /= np.linalg.norm(vec)
            vec.setflags(write=False)
            self._cache[sentence] = vec
        return vec


class FileProvider:
    """Exact-string lookup in a ``dim <d>`` + ``sentence<TAB>floats`` table."""

    source = "file"

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.dim = dim
        self.table = table

    @classmethod
    def parse(cls, text: str) -> "FileProvider":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("dim "):
            raise ValueError("line 1: expected 'dim <d>' header")
        dim = int(lines[0].split()[1])
        table: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"line {lineno}: expected '<sentence>\\t<floats>'")
            sentence, nums = line.split("\t", 1)
            vec = np.array([float(x) for x in nums.split()])
            if vec.shape != (dim,):
                raise ValueError(f"line {lineno}: expected {dim} values, got {vec.size}")
            table[sentence] = vec
        return cls(table, dim)

    @classmethod
    def load(cls, path: str | Path) -> "FileProvider":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def embed(self, sentence: str) -> np.ndarray:
        try:
            return self.table[sentence]
        except KeyError:
            raise KeyError(f"sentence not in embedding table: {sentence!r}") from None


def format_table(table: dict[str, np.ndarray], dim: int) -> str:
    lines = [f"dim {dim}"]
    for sentence in sorted(table):
        lines.append(sentence + "\t" + " ".join(f"{x:.17g}" for x in table[sentence]))
    return "\n".join(lines) + "\n"


def word_sum_table(sentences: Sequence[str], dim: int) -> dict[str, np.ndarray]:
    """Unit vectors built as the normalised sum of per-word stub vectors.

    Unlike :class:`StubProvider`, which hashes whole sentences, sentences that
    share words get correlated vectors, the way a trained text encoder's do.
    Meant to be written with :func:`format_table` and read by :class:`FileProvider`.
    """
    words = StubProvider(dim)
    out = {}
    for s in sentences:
        v = np.sum([words.embed(w) for w in s.split()], axis=0)
        out[s] = v / np.linalg.norm(v)
    return out


def prompt_sentences(vocab: Vocabulary, template: PromptTemplate | str = DEFAULT_TEMPLATE,
                     subjects: Sequence[int] = (0,)) -> list[str]:
    """Every prompt the vocabulary can produce with the given subject classes."""
    names = vocab.entity_classes
    return sorted({build_prompt(template, names[s], p.surface_form, names[o])
                   for s in subjects for o in range(len(names)) for p in vocab.predicate_classes})


def embed_text(sentence: str, provider: EmbeddingProvider) -> TextEmbedding:
    return TextEmbedding(np.asarray(provider.embed(sentence), dtype=np.float64), provider.source)


def label_set_embedding(subject: str, obj: str, labels, vocab: Vocabulary, provider: EmbeddingProvider,
                        template: PromptTemplate | str = DEFAULT_TEMPLATE) -> np.ndarray:
    vecs = [embed_text(build_prompt(template, subject, vocab.predicate_classes[p].surface_form, obj), provider).vector
            for p in sorted(labels)]
    return np.mean(vecs, axis=0)


def pair_sentence_embedding(frame: FrameGraph, pair: tuple[int, int], vocab: Vocabulary,
                            provider: EmbeddingProvider,
                            template: PromptTemplate | str = DEFAULT_TEMPLATE) -> np.ndarray | None:
    """Mean embedding of one prompted sentence per ground-truth predicate of ``pair``.

    Returns None for a pair without labels in this frame.
    """
    labels = frame.relation_map().get(pair)
    if not labels:
        return None
    s, o = (frame.entity(i).class_id for i in pair)
    return label_set_embedding(vocab.entity_classes[s], vocab.entity_classes[o], labels, vocab, provider, template)


# ---------------------------------------------------------------- losses


@dataclass
class LossTerm:
    value: Tensor
    count: int
    warning: str | None = None


def _empty(what: str) -> LossTerm:
    msg = f"no contributing {what}; loss set to 0"
    warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return LossTerm(Tensor(0.0), 0, msg)


def _project(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    return ag.linear(x, weight, bias)


def guidance_loss(e_r: Tensor, targets: np.ndarray, transitions: np.ndarray,
                  weight: Tensor, bias: Tensor | None = None) -> LossTerm:
    """Mean squared error between projected feature differences and text-embedding differences.

    ``e_r`` holds one row per pair-frame, ``targets`` the matching sentence
    embeddings, and ``transitions`` rows ``(prev_row, cur_row)`` for adjacent
    frames where the pair is labelled in both. Averaged over transitions and
    embedding entries. Teacher embeddings are constants.
    """
    transitions = np.asarray(transitions, dtype=np.int64).reshape(-1, 2)
    if len(transitions) == 0:
        return _empty("transitions")
    proj = _project(e_r, weight, bias)
    diff = ag.sub(ag.gather_rows(proj, transitions[:, 1]), ag.gather_rows(proj, transitions[:, 0]))
    teacher = targets[transitions[:, 1]] - targets[transitions[:, 0]]
    err = ag.sub(diff, Tensor._wrap(teacher, False))
    return LossTerm(ag.mean(ag.square(err)), len(transitions))


def guidance_loss_direct(e_r: Tensor, targets: np.ndarray, rows: np.ndarray,
                         weight: Tensor, bias: Tensor | None = None) -> LossTerm:
    """Per-frame variant without differencing: MSE between projected e_r and e_s on labelled rows."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if len(rows) == 0:
        return _empty("pair-frames")
    proj = ag.gather_rows(_project(e_r, weight, bias), rows)
    err = ag.sub(proj, Tensor._wrap(targets[rows], False))
    return LossTerm(ag.mean(ag.square(err)), len(rows))


def bce(p: Tensor, y: np.ndarray, clamp: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets, logs clamped."""
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    pos = ag.mul(ag.log(p, clamp), y)
    neg = ag.mul(ag.log(ag.add_const(ag.scale(p, -1.0), 1.0), clamp), 1.0 - y)
    return ag.scale(ag.mean(ag.add(pos, neg)), -1.0)


def binary_change_loss(e_r: Tensor, transitions: np.ndarray, changed: np.ndarray,
                       weight: Tensor, bias: Tensor) -> LossTerm:
    """BCE of an affine+sigmoid head on ``e_r_t - e_r_{t-1}`` against label-change flags."""
    transitions = np.asarray(transitions, dtype=np.int64).reshape(-1, 2)
    if len(transitions) == 0:
        return _empty("transitions")
    diff = ag.sub(ag.gather_rows(e_r, transitions[:, 1]), ag.gather_rows(e_r, transitions[:, 0]))
    p = ag.sigmoid(ag.linear(diff, weight, bias))
    return LossTerm(bce(p, np.asarray(changed, dtype=np.float64)), len(transitions))


def adjacent_transitions(keys: Sequence[tuple[int, int, int, int]], labelled: np.ndarray) -> np.ndarray:
    """``(prev_row, cur_row)`` for each pair labelled in frame positions t-1 and t."""
    where = {k: n for n, k in enumerate(keys) if labelled[n]}
    out = [(where[(v, t - 1, s, o)], n) for (v, t, s, o), n in where.items() if (v, t - 1, s, o) in where]
    return np.array(sorted(out, key=lambda x: x[1]), dtype=np.int64).reshape(-1, 2)
