import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tr2.scenegraph import (
    BoundingBox,
    DatasetFormatError,
    EntityInstance,
    FrameGraph,
    RelationEdge,
    VideoSample,
    Vocabulary,
    change_degree,
    format_dataset,
    iou,
    parse_dataset,
    union_box,
)
from tr2.synth import GenConfig, generate


def box(*c):
    return BoundingBox(*c)


@st.composite
def boxes(draw):
    x1, x2 = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2, unique=True)))
    y1, y2 = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2, unique=True)))
    return BoundingBox(x1, y1, x2, y2)


def test_union_examples():
    assert union_box(box(0, 0, 1, 1), box(0, 0, 1, 1)) == box(0, 0, 1, 1)
    assert union_box(box(0, 0, .2, .2), box(.5, .5, .8, .9)) == box(0, 0, .8, .9)


def test_iou_examples():
    assert iou(box(.1, .2, .3, .4), box(.1, .2, .3, .4)) == 1.0
    assert iou(box(0, 0, .2, .2), box(.5, .5, .7, .7)) == 0.0
    # intersection .01, areas .04 each: .01 / .07
    assert iou(box(0, 0, .2, .2), box(.1, .1, .3, .3)) == pytest.approx(1 / 7, abs=1e-12)


def test_invalid_boxes_rejected():
    with pytest.raises(ValueError):
        box(.5, 0, .5, 1)
    with pytest.raises(ValueError):
        box(0, 0, 1.2, 1)


@given(boxes(), boxes())
def test_union_contains_both_and_commutes(a, b):
    u = union_box(a, b)
    for x in (a, b):
        assert u.x1 <= x.x1 and u.y1 <= x.y1 and u.x2 >= x.x2 and u.y2 >= x.y2
    assert u == union_box(b, a)


@given(boxes(), boxes(), boxes())
def test_union_associative(a, b, c):
    assert union_box(union_box(a, b), c) == union_box(a, union_box(b, c))


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0 + 1e-12


# ---------------------------------------------------------------- change degree


def ent(i, cls=0):
    return EntityInstance(i, cls, box(.1, .1, .2, .2), np.zeros(2))


def frame(t, labels_by_pair, classes=None):
    classes = classes or {}
    ids = sorted({i for p in labels_by_pair for i in p} | {0, 1, 2})
    ents = tuple(ent(i, classes.get(i, i)) for i in ids)
    edges = tuple(RelationEdge(s, o, frozenset(l)) for (s, o), l in sorted(labels_by_pair.items()))
    return FrameGraph(t, ents, edges)


def test_change_degree_examples():
    same = VideoSample("a", tuple(frame(t, {(0, 1): {2}}) for t in range(4)))
    assert change_degree(same) == 0.0
    alt = VideoSample("b", tuple(frame(t, {(0, 1): {t % 2}}) for t in range(4)))
    assert change_degree(alt) == 1.0
    # only the 2 -> 3 transition (second of three) changes
    one = VideoSample("c", (frame(1, {(0, 1): {0}}), frame(2, {(0, 1): {0}}),
                            frame(3, {(0, 1): {5}}), frame(4, {(0, 1): {5}})))
    assert change_degree(one) == pytest.approx(1 / 3)
    assert change_degree(VideoSample("d", (frame(0, {(0, 1): {1}}),))) == 0.0


def test_pair_appearance_counts_as_change():
    v = VideoSample("e", (frame(0, {(0, 1): {1}}), frame(1, {(0, 1): {1}, (0, 2): {3}})))
    assert change_degree(v) == 1.0


label_sets = st.frozensets(st.integers(0, 4), min_size=1, max_size=3)


@given(st.lists(st.dictionaries(st.sampled_from([(0, 1), (0, 2), (1, 2)]), label_sets, max_size=3),
                min_size=1, max_size=6),
       st.permutations(range(3)))
def test_change_degree_ignores_class_relabelling(graphs, perm):
    a = VideoSample("x", tuple(frame(t, g) for t, g in enumerate(graphs)))
    relabel = {i: 10 + perm[i] for i in range(3)}
    b = VideoSample("x", tuple(frame(t, g, relabel) for t, g in enumerate(graphs)))
    assert change_degree(a) == change_degree(b)
    assert 0.0 <= change_degree(a) <= 1.0


# ---------------------------------------------------------------- invariants


def test_frame_and_video_invariants():
    with pytest.raises(ValueError):
        RelationEdge(1, 1, frozenset({0}))
    with pytest.raises(ValueError):
        RelationEdge(0, 1, frozenset())
    with pytest.raises(ValueError):
        FrameGraph(0, (ent(0),), (RelationEdge(0, 9, frozenset({1})),))
    with pytest.raises(ValueError):
        VideoSample("v", (frame(2, {}), frame(1, {})))
    with pytest.raises(ValueError):
        EntityInstance(0, 0, box(0, 0, 1, 1), np.zeros(1), np.array([0.5, 0.4]))


def test_default_vocabulary():
    v = Vocabulary.default()
    assert len(v.entity_classes) == 36 and v.num_predicates == 26
    sizes = {k: len(ids) for k, ids in v.category_ids().items()}
    assert sizes == {"attention": 3, "spatial": 6, "contacting": 17}
    assert all(p.surface_form for p in v.predicate_classes)


# ---------------------------------------------------------------- dataset file


def test_dataset_roundtrip_generated():
    videos, _ = generate(GenConfig(seed=2, num_videos=4, frames_per_video=3))
    text = format_dataset(videos)
    back = parse_dataset(text, num_classes=36)
    assert back == videos
    assert format_dataset(back) == text


SAMPLE = """#video v1 2
#frame 0
E 0 0 0.1 0.1 0.5 0.5 1.5 -2
E 1 4 0.2 0.2 0.4 0.9 0 0
R 0 1 0,7
#frame 1
E 0 0 0.1 0.1 0.5 0.5 1.5 -2
E 1 4 0.2 0.2 0.4 0.9 0 0
D 1 0.2 0.2 0.4 0.8 0.25 0.75
R 0 1 7
"""


def test_parse_sample():
    (v,) = parse_dataset(SAMPLE)
    assert v.video_id == "v1" and v.T == 2
    assert v.frames[0].relation_map() == {(0, 1): frozenset({0, 7})}
    e = v.frames[1].entity(1)
    assert e.detected_box == box(.2, .2, .4, .8)
    np.testing.assert_array_equal(e.scores(2), [0.25, 0.75])
    assert change_degree(v) == 1.0


@pytest.mark.parametrize("lineno, bad", [
    (3, "E 0 x 0.1 0.1 0.5 0.5"),
    (3, "E 0 0 0.5 0.1 0.1 0.5"),
    (3, "Q 1 2"),
    (5, "R 0 1 a,b"),
    (5, "R 0 0 1"),
])
def test_malformed_lines_report_line_number(lineno, bad):
    lines = SAMPLE.splitlines()
    lines[lineno - 1] = bad
    with pytest.raises(DatasetFormatError) as exc:
        parse_dataset("\n".join(lines))
    assert exc.value.lineno == lineno
    assert f"line {lineno}" in str(exc.value)


def test_frame_count_mismatch_rejected():
    with pytest.raises(DatasetFormatError):
        parse_dataset(SAMPLE.replace("#video v1 2", "#video v1 3"))


def test_class_range_checked():
    with pytest.raises(DatasetFormatError):
        parse_dataset(SAMPLE, num_classes=3)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3))
def test_dataset_roundtrip_property(seed, T, pairs):
    videos, _ = generate(GenConfig(seed=seed, num_videos=2, frames_per_video=T, pairs_per_frame=pairs, d_v=3))
    assert parse_dataset(format_dataset(videos)) == videos
