import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tr2.scenegraph import change_degree, format_dataset
from tr2.synth import (
    GenConfig,
    format_embeddings,
    generate,
    make_prototypes,
    parse_embeddings,
    split,
)


def test_no_switching_means_no_change():
    videos, _ = generate(GenConfig(seed=1, num_videos=30, change_rate=0.0))
    assert all(change_degree(v) == 0.0 for v in videos)


def test_always_switching_changes_nearly_every_transition():
    videos, _ = generate(GenConfig(seed=1, num_videos=100, change_rate=1.0))
    assert np.mean([change_degree(v) for v in videos]) > 0.9


@pytest.mark.parametrize("p", [0.1, 0.3, 0.7])
def test_per_transition_change_frequency(p):
    cfg = GenConfig(seed=11, num_videos=150, change_rate=p)
    videos, _ = generate(cfg)
    cats = cfg.vocabulary.category_of()
    hits = trials = 0
    for v in videos:
        for a, b in zip(v.frames, v.frames[1:]):
            ra, rb = a.relation_map(), b.relation_map()
            for pair, labels in ra.items():
                for c in range(3):
                    before = [x for x in labels if cats[x] == c]
                    after = [x for x in rb[pair] if cats[x] == c]
                    hits += before != after
                    trials += 1
    freq = hits / trials
    se = math.sqrt(p * (1 - p) / trials)
    assert abs(freq - p) < 3 * se


def test_one_predicate_per_category():
    cfg = GenConfig(seed=4, num_videos=10)
    cats = cfg.vocabulary.category_of()
    videos, _ = generate(cfg)
    for v in videos:
        for f in v.frames:
            for e in f.edges:
                assert sorted(cats[list(e.labels)]) == [0, 1, 2]


def test_same_seed_same_bytes():
    cfg = GenConfig(seed=9, num_videos=5)
    a, ea = generate(cfg)
    b, eb = generate(cfg)
    assert format_dataset(a) == format_dataset(b)
    assert format_embeddings(ea, cfg.d_clip) == format_embeddings(eb, cfg.d_clip)
    c, _ = generate(GenConfig(seed=10, num_videos=5))
    assert format_dataset(c) != format_dataset(a)


def test_videos_are_generated_independently():
    small, _ = generate(GenConfig(seed=3, num_videos=3))
    big, _ = generate(GenConfig(seed=3, num_videos=6))
    assert big[:3] == small


def test_noiseless_embeddings_recover_predicates():
    cfg = GenConfig(seed=5, num_videos=20, subtlety=0.0)
    protos = make_prototypes(cfg)
    videos, emb = generate(cfg)
    groups = list(cfg.vocabulary.category_ids().values())
    correct = total = 0
    for v in videos:
        for f in v.frames:
            for e in f.edges:
                sc, oc = f.entity(e.subject_id).class_id, f.entity(e.object_id).class_id
                x = emb[(v.video_id, f.frame_index, e.subject_id, e.object_id)]
                # nearest prototype over every one-per-category label set
                best, best_d = None, np.inf
                for a in groups[0]:
                    for b in groups[1]:
                        for c in groups[2]:
                            d = np.linalg.norm(x - protos.crop_prototype(sc, oc, (a, b, c)))
                            if d < best_d:
                                best, best_d = frozenset((a, b, c)), d
                correct += best == e.labels
                total += 1
    assert correct == total


def test_embedding_file_roundtrip():
    cfg = GenConfig(seed=2, num_videos=2, frames_per_video=2)
    _, emb = generate(cfg)
    dim, back = parse_embeddings(format_embeddings(emb, cfg.d_clip))
    assert dim == cfg.d_clip and back.keys() == emb.keys()
    for k in emb:
        np.testing.assert_array_equal(back[k], emb[k])


def test_embedding_file_rejects_wrong_width():
    with pytest.raises(ValueError, match="line 2"):
        parse_embeddings("dim 3\nv0 0 0 1 1.0 2.0\n")


def test_detector_scores_are_distributions():
    videos, _ = generate(GenConfig(seed=6, num_videos=3, class_confusion=0.5))
    for v in videos:
        for f in v.frames:
            for e in f.entities:
                assert e.class_scores.sum() == 1.0 and np.all(e.class_scores >= 0)


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(change_rate=1.5)
    with pytest.raises(ValueError):
        GenConfig(num_videos=0)
    with pytest.raises(ValueError):
        GenConfig(subtlety=-1)


def test_change_rate_mix_cycles_by_index():
    cfg = GenConfig(seed=1, num_videos=8, change_rate_mix=(0.0, 1.0))
    videos, _ = generate(cfg)
    assert [change_degree(v) for v in videos[0::2]] == [0.0] * 4
    assert all(change_degree(v) == 1.0 for v in videos[1::2])


# ---------------------------------------------------------------- split


def test_split_sizes_and_determinism():
    videos, _ = generate(GenConfig(seed=0, num_videos=10, frames_per_video=1))
    parts = split(videos, (0.8, 0.1, 0.1), seed=3)
    assert [len(p) for p in parts] == [8, 1, 1]
    assert split(videos, (0.8, 0.1, 0.1), seed=3) == parts


def test_split_rejects_bad_input():
    videos, _ = generate(GenConfig(seed=0, num_videos=3, frames_per_video=1))
    with pytest.raises(ValueError):
        split([], (0.5, 0.5), 0)
    with pytest.raises(ValueError):
        split(videos, (0.5, 0.4), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.lists(st.integers(1, 9), min_size=1, max_size=4), st.integers(0, 99))
def test_split_is_a_partition(n, weights, seed):
    videos, _ = generate(GenConfig(seed=0, num_videos=n, frames_per_video=1, pairs_per_frame=1, d_v=2, d_clip=2))
    ratios = [w / sum(weights) for w in weights]
    parts = split(videos, ratios, seed)
    ids = [v.video_id for p in parts for v in p]
    assert sorted(ids) == sorted(v.video_id for v in videos)
    assert len(ids) == len(set(ids))
