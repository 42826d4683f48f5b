"""Prototype library building, scoring, KNN voting, persistence."""

from __future__ import annotations

import numpy as np
import pytest

from xdetect.core import BBox, Image, ModelOutput
from xdetect.extraction import ExtractionError, ExtractorSpec
from xdetect.oed import (
    OedConfig,
    PrototypeScore,
    build_prototype_library,
    load_library,
    oed_classify,
    prototype_knn_classify,
    save_library,
    score_prototypes,
)
from xdetect.sift import match_count
from xdetect.synthetic import default_world, prototype_images, render_scene

WORLD = default_world()


@pytest.fixture(scope="module")
def small_library():
    imgs = {WORLD[c].name: prototype_images(WORLD, c, 3) for c in range(4)}
    return build_prototype_library(imgs, n_per_class=3)


# ----------------------------------------------------------------- building


def test_library_shape(small_library):
    lib = small_library
    assert lib.class_names == ("apple", "banana", "lime", "plum")
    assert len(lib.entries) == 12
    assert lib.entries[0].prototype_id == "apple_000"
    assert all(e.descriptors.shape[1] == 128 for e in lib.entries if len(e.descriptors))
    for cid in range(4):
        assert len(lib.entries_of(cid)) == 3


def test_build_rejects_underfilled_class():
    imgs = {"apple": prototype_images(WORLD, 0, 2)}
    with pytest.raises(ValueError, match="apple"):
        build_prototype_library(imgs, n_per_class=3)


def test_build_names_failing_prototype():
    flat = [Image(np.full((64, 64, 3), 0.5))]
    with pytest.raises(ExtractionError, match="flat_000"):
        build_prototype_library({"flat": flat}, n_per_class=1)


# ------------------------------------------------------------------ scoring


def test_scores_follow_library_order(small_library):
    q = small_library.entries[0].image
    scores = score_prototypes(q, small_library)
    assert [s.prototype_id for s in scores] == [e.prototype_id
                                                for e in small_library.entries]


def test_scores_equal_direct_recomputation(small_library):
    # Oracle: re-derive every score from the stored rasters via match_count.
    lib = small_library
    query = render_scene(WORLD, 2, seed=77)
    crop = query.image.data[query.annotation.bbox.y1:query.annotation.bbox.y2,
                            query.annotation.bbox.x1:query.annotation.bbox.x2]
    q = Image(crop)
    got = [s.match_count for s in score_prototypes(q, lib)]
    want = [match_count(q, e.image, lib.sift_params) for e in lib.entries]
    assert got == want


def test_self_query_dominates(small_library):
    lib = small_library
    entry = lib.entries[4]  # banana_001
    scores = score_prototypes(entry.image, lib)
    best = max(scores, key=lambda s: s.match_count)
    assert best.prototype_id == entry.prototype_id
    assert best.match_count == len(entry.descriptors)


# ---------------------------------------------------------------- knn voting


def _score(pid, cid, n):
    return PrototypeScore(pid, cid, n)


def test_knn_majority_vote():
    scores = [_score("a0", 0, 9), _score("a1", 0, 8), _score("a2", 0, 7),
              _score("b0", 1, 10), _score("b1", 1, 2), _score("c0", 2, 1)]
    cls, votes = prototype_knn_classify(scores, k=5, n_classes=3)
    # top5 = b0, a0, a1, a2, b1 -> class0 has 3 of 5 votes.
    assert cls == 0
    assert votes.mass == pytest.approx([0.6, 0.4, 0.0])


def test_knn_k1_is_argmax_match_count():
    scores = [_score("a0", 0, 4), _score("b0", 1, 9), _score("c0", 2, 9)]
    # Tie on count: prototype id ascending wins -> b0.
    cls, votes = prototype_knn_classify(scores, k=1, n_classes=3)
    assert cls == 1
    assert votes.mass == pytest.approx([0.0, 1.0, 0.0])


def test_knn_vote_tie_breaks_by_summed_counts():
    scores = [_score("a0", 0, 9), _score("a1", 0, 2),
              _score("b0", 1, 6), _score("b1", 1, 6)]
    cls, _ = prototype_knn_classify(scores, k=4, n_classes=2)
    # Votes 2:2; sums 11 vs 12 -> class 1.
    assert cls == 1


def test_knn_full_tie_takes_lowest_class():
    scores = [_score("a0", 0, 5), _score("b0", 1, 5)]
    cls, _ = prototype_knn_classify(scores, k=2, n_classes=2)
    assert cls == 0


def test_knn_clamps_oversized_k(caplog):
    scores = [_score("a0", 0, 5), _score("b0", 1, 3)]
    with caplog.at_level("WARNING"):
        cls, votes = prototype_knn_classify(scores, k=7, n_classes=2)
    assert cls == 0
    assert "clamping" in caplog.text
    assert votes.mass == pytest.approx([0.5, 0.5])


def test_knn_rejects_bad_k_and_empty():
    with pytest.raises(ValueError):
        prototype_knn_classify([_score("a0", 0, 1)], k=0, n_classes=1)
    with pytest.raises(ValueError):
        prototype_knn_classify([], k=1, n_classes=1)


def test_knn_all_zero_scores_inconclusive():
    scores = [_score("a0", 0, 0), _score("b0", 1, 0)]
    assert prototype_knn_classify(scores, k=2, n_classes=2) == (None, None)


def test_knn_permutation_invariant():
    rng = np.random.default_rng(0)
    scores = [_score(f"p{i}", int(rng.integers(3)), int(rng.integers(12)))
              for i in range(20)]
    base = prototype_knn_classify(scores, k=7, n_classes=3)
    for _ in range(5):
        rng.shuffle(scores)
        assert prototype_knn_classify(scores, k=7, n_classes=3) == base


# ------------------------------------------------------------- end to end


def test_oed_classifies_benign_and_marker_scenes(small_library):
    for cls in (0, 2):
        for marker in (False, True):
            sample = render_scene(WORLD, cls, seed=60 + cls, marker=marker)
            out = ModelOutput(sample.annotation.bbox, 0, 0.9)
            res = oed_classify(sample.image, out, small_library,
                               OedConfig(k=5, extractor=ExtractorSpec("background_diff")))
            assert not res.inconclusive
            assert res.class_id == cls  # marker adds nothing the library knows
            assert res.votes.total == pytest.approx(1.0)


def test_oed_zero_descriptor_query_is_inconclusive(small_library):
    scene = np.full((64, 64, 3), 0.08)
    scene[20:52, 20:52] = 0.7  # bright but featureless block
    out = ModelOutput(BBox(20, 20, 52, 52), 0, 0.9)
    res = oed_classify(Image(scene), out, small_library,
                       OedConfig(k=3, extractor=ExtractorSpec("bbox_crop")))
    assert res.inconclusive
    assert res.class_id is None
    assert "descriptor" in res.note or "small" in res.note


def test_oed_tiny_crop_is_inconclusive(small_library):
    scene = np.full((64, 64, 3), 0.08)
    scene[30:40, 30:40] = 0.7
    out = ModelOutput(BBox(30, 30, 40, 40), 0, 0.9)
    res = oed_classify(Image(scene), out, small_library,
                       OedConfig(extractor=ExtractorSpec("bbox_crop")))
    assert res.inconclusive


# --------------------------------------------------------------- persistence


def test_save_load_round_trip_scores(tmp_path, small_library):
    lib_dir = tmp_path / "lib"
    save_library(small_library, lib_dir)
    loaded = load_library(lib_dir)
    assert loaded.class_names == small_library.class_names
    assert loaded.n_per_class == small_library.n_per_class
    assert loaded.sift_params == small_library.sift_params
    for a, b in zip(small_library.entries, loaded.entries):
        assert a.prototype_id == b.prototype_id
        assert np.array_equal(a.descriptors, b.descriptors)
        assert a.keypoints == b.keypoints

    sample = render_scene(WORLD, 1, seed=91)
    b = sample.annotation.bbox
    q = Image(sample.image.data[b.y1:b.y2, b.x1:b.x2])
    s0 = [(s.prototype_id, s.match_count) for s in score_prototypes(q, small_library)]
    s1 = [(s.prototype_id, s.match_count) for s in score_prototypes(q, loaded)]
    assert s0 == s1


def test_save_refuses_overwrite(tmp_path, small_library):
    lib_dir = tmp_path / "lib"
    save_library(small_library, lib_dir)
    with pytest.raises(FileExistsError):
        save_library(small_library, lib_dir)
    save_library(small_library, lib_dir, force=True)


def test_load_missing_library(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_library(tmp_path / "nope")
