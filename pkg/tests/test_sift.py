"""Scale space, keypoints, descriptors, and the ratio-test matcher."""

from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage

from xdetect.sift import (
    MatchSet,
    SiftParams,
    build_scale_space,
    compute_descriptors,
    default_n_octaves,
    detect_keypoints,
    extract_features,
    match_count,
    match_descriptors,
)


def textured(seed: int, size: int = 128, n_dots: int = 90, peak: float = 0.75) -> np.ndarray:
    """Deterministic blob texture with intensities kept below `peak`."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size), 0.35)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_dots):
        cx, cy = rng.uniform(12, size - 12, 2)
        s = rng.uniform(1.5, 4.0)
        amp = rng.uniform(-0.3, 0.38)
        img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
    return np.clip(img, 0.0, peak)


def brute_force_pairs(a: np.ndarray, b: np.ndarray, ratio: float) -> list[tuple[int, int]]:
    """O(n^2) reference matcher: ratio test, then unique targets by best distance."""
    cands = []
    for i in range(len(a)):
        ds = sorted((float(np.linalg.norm(a[i] - b[j])), j) for j in range(len(b)))
        if not ds:
            continue
        if len(ds) == 1:
            cands.append((ds[0][0], i, ds[0][1]))
        elif ds[0][0] < ratio * ds[1][0]:
            cands.append((ds[0][0], i, ds[0][1]))
    taken, pairs = set(), []
    for d, i, j in sorted(cands, key=lambda t: (t[0], t[1])):
        if j not in taken:
            taken.add(j)
            pairs.append((i, j))
    return sorted(pairs)


# ---------------------------------------------------------------- scale space


def test_scale_space_structure_64():
    space = build_scale_space(np.clip(textured(0, 64), 0, 1))
    assert space.n_octaves == default_n_octaves(64, 64) == 4
    L = space.params.intervals
    for o, (g, d) in enumerate(zip(space.gaussians, space.dogs)):
        assert g.shape[0] == L + 3
        assert d.shape[0] == L + 2
        assert g.shape[1:] == (64 // 2 ** o, 64 // 2 ** o)
        assert np.allclose(d, g[1:] - g[:-1])


def test_scale_space_rejects_small_images():
    with pytest.raises(ValueError):
        build_scale_space(np.zeros((15, 40)))


def test_sigma_accessor_doubles_per_octave():
    space = build_scale_space(textured(1, 64))
    assert space.sigma_of(0, 0) == pytest.approx(1.6)
    assert space.sigma_of(1, 0) == pytest.approx(3.2)
    assert space.sigma_of(0, 3) == pytest.approx(3.2)


def test_params_validation():
    with pytest.raises(ValueError):
        SiftParams(intervals=0)
    with pytest.raises(ValueError):
        SiftParams(base_sigma=0.4)
    with pytest.raises(ValueError):
        SiftParams(match_ratio=0.0)


# ----------------------------------------------------------------- keypoints


def test_constant_image_yields_no_keypoints():
    space = build_scale_space(np.full((64, 64), 0.5))
    assert detect_keypoints(space) == []
    kps, desc = extract_features(np.full((64, 64), 0.5))
    assert kps == [] and desc.shape == (0, 128)


def test_dog_peak_level_tracks_blob_scale():
    # Oracle: exhaustive scan of every DoG level for the largest magnitude.
    yy, xx = np.mgrid[0:96, 0:96]
    blob = 0.1 + 0.8 * np.exp(-((xx - 48) ** 2 + (yy - 48) ** 2) / (2 * 4.0 ** 2))
    space = build_scale_space(blob)
    best = (-1.0, 0, 0)
    for o, dog in enumerate(space.dogs):
        for layer in range(dog.shape[0]):
            v = float(np.abs(dog[layer]).max())
            if v > best[0]:
                best = (v, o, layer)
    sigma_eff = space.sigma_of(best[1], best[2] + 0.5)
    assert 4.0 / 1.5 <= sigma_eff <= 4.0 * 1.5


def test_blob_keypoint_position_and_scale():
    yy, xx = np.mgrid[0:64, 0:64]
    blob = 0.1 + 0.8 * np.exp(-((xx - 32) ** 2 + (yy - 32) ** 2) / (2 * 3.0 ** 2))
    space = build_scale_space(blob)
    kps = detect_keypoints(space)
    near = [k for k in kps if abs(k.x - 32) <= 2.0 and abs(k.y - 32) <= 2.0]
    assert near, "no keypoint near the blob center"
    assert any(3.0 / 1.5 <= k.sigma <= 3.0 * 1.5 for k in near)


def test_keypoint_field_ranges():
    kps, _ = extract_features(textured(2))
    assert len(kps) >= 10
    for k in kps:
        assert k.sigma > 0
        assert 0.0 <= k.orientation < 2 * np.pi
        assert k.response >= 0


def test_detection_is_deterministic():
    img = textured(3)
    a = extract_features(img)
    b = extract_features(img)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_rotation_15_repeatability():
    img = textured(5)
    kps, _ = extract_features(img)
    rot = np.clip(ndimage.rotate(img, 15, reshape=False, order=3,
                                 mode="constant", cval=0.35), 0, 1)
    k15, _ = extract_features(rot)
    h, w = img.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    th = np.deg2rad(15)
    survivors = total = 0
    for kp in kps:
        dx, dy = kp.x - cx, kp.y - cy
        tx = cx + np.cos(th) * dx + np.sin(th) * dy
        ty = cy - np.sin(th) * dx + np.cos(th) * dy
        if not (8 <= tx < w - 8 and 8 <= ty < h - 8):
            continue
        total += 1
        if any((kq.x - tx) ** 2 + (kq.y - ty) ** 2 <= 9.0 for kq in k15):
            survivors += 1
    assert total >= 15
    assert survivors >= 0.5 * total


# --------------------------------------------------------------- descriptors


def test_descriptor_invariants():
    kps, desc = extract_features(textured(2))
    assert desc.shape[1] == 128
    assert desc.min() >= 0.0
    assert np.allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-6)


def test_descriptor_index_map_subset():
    img = textured(4)
    space = build_scale_space(img)
    kps = detect_keypoints(space)
    desc, kept = compute_descriptors(space, kps)
    assert len(desc) == len(kept)
    assert all(0 <= i < len(kps) for i in kept)
    assert kept == sorted(kept)


def _paired_descriptor_distances(img_a, img_b, map_xy):
    """Distances between descriptors paired by predicted position (best of ties)."""
    ka, da = extract_features(img_a)
    kb, db = extract_features(img_b)
    dists = []
    for i, kp in enumerate(ka):
        tx, ty = map_xy(kp.x, kp.y)
        near = [j for j, kq in enumerate(kb)
                if (kq.x - tx) ** 2 + (kq.y - ty) ** 2 <= 4.0]
        if near:
            dists.append(min(float(np.linalg.norm(da[i] - db[j])) for j in near))
    return len(ka), dists


def test_descriptors_survive_90_rotation():
    img = textured(5)
    w = img.shape[1]
    n, dists = _paired_descriptor_distances(img, np.rot90(img),
                                            lambda x, y: (y, w - 1 - x))
    assert len(dists) >= 0.8 * n
    assert np.mean(np.asarray(dists) < 0.4) >= 0.9


def test_descriptors_survive_brightness_scaling():
    img = textured(5)  # peak 0.75, so x1.3 does not clip
    bright = np.clip(img * 1.3, 0, 1)
    n, dists = _paired_descriptor_distances(img, bright, lambda x, y: (x, y))
    assert len(dists) >= 0.8 * n
    assert np.mean(np.asarray(dists) < 0.25) >= 0.9


# ------------------------------------------------------------------ matching


def test_match_set_rejects_duplicate_targets():
    with pytest.raises(ValueError):
        MatchSet(((0, 1, 0.1), (2, 1, 0.2)))


def test_empty_descriptor_sets_match_to_zero():
    d = np.zeros((0, 128))
    full = np.eye(128)[:5]
    assert match_descriptors(d, full).count == 0
    assert match_descriptors(full, d).count == 0
    assert match_descriptors(d, d).count == 0


def test_singleton_target_uses_nearest_only():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 128))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = a[2:3].copy()
    ms = match_descriptors(a, b, 0.8)
    # One target available: exactly one pair survives uniqueness.
    assert ms.count == 1
    assert ms.pairs[0][1] == 0


def test_identical_lists_self_match_completely():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(40, 128))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    ms = match_descriptors(a, a.copy(), 0.8)
    assert ms.count == 40
    assert all(i == j for i, j, _ in ms.pairs)


@pytest.mark.parametrize("na,nb,seed", [(5, 5, 0), (50, 50, 1), (200, 137, 2),
                                        (1, 1, 3), (7, 1, 4), (3, 200, 5)])
def test_matcher_equals_brute_force_oracle(na, nb, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(na, 128))
    b = rng.normal(size=(nb, 128))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    got = sorted((i, j) for i, j, _ in match_descriptors(a, b, 0.8).pairs)
    assert got == brute_force_pairs(a, b, 0.8)


def test_matcher_target_uniqueness_on_images():
    img = textured(6)
    rot = np.clip(ndimage.rotate(img, 15, reshape=False, order=3,
                                 mode="constant", cval=0.35), 0, 1)
    _, da = extract_features(img)
    _, db = extract_features(rot)
    ms = match_descriptors(da, db, 0.8)
    targets = [j for _, j, _ in ms.pairs]
    assert len(set(targets)) == len(targets)


def test_tighter_ratio_never_matches_more():
    img = textured(6)
    rot = np.clip(ndimage.rotate(img, 15, reshape=False, order=3,
                                 mode="constant", cval=0.35), 0, 1)
    _, da = extract_features(img)
    _, db = extract_features(rot)
    c_tight = match_descriptors(da, db, 0.7).count
    c_loose = match_descriptors(da, db, 0.8).count
    assert c_tight <= c_loose


def test_match_count_self_and_rotated():
    img = textured(5)
    _, desc = extract_features(img)
    # Precondition for the self-match identity: descriptors mutually distant.
    gaps = np.linalg.norm(desc[:, None, :] - desc[None, :, :], axis=2)
    np.fill_diagonal(gaps, np.inf)
    assert gaps.min() > 0.05
    n_self = match_count(img, img)
    assert n_self == len(desc)
    rot = np.clip(ndimage.rotate(img, 15, reshape=False, order=3,
                                 mode="constant", cval=0.35), 0, 1)
    assert match_count(img, rot) >= 0.5 * n_self


def test_match_count_is_the_op_composition():
    img_a, img_b = textured(7), textured(8)
    _, da = extract_features(img_a)
    _, db = extract_features(img_b)
    assert match_count(img_a, img_b) == match_descriptors(da, db, 0.8).count
