"""Scale-invariant keypoints, descriptors, and ratio-test matching.

The object-extraction detector scores a query against each stored prototype by
the number of accepted descriptor matches, so this module is the measurement
instrument for the whole prototype-KNN path. It follows the classic
construction: Gaussian scale space, difference-of-Gaussians extrema with
subpixel refinement, orientation histograms, 4x4x8 gradient descriptors,
nearest/second-nearest ratio matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Image, gray_array

# Blur assumed already present in the input raster (sensor prefilter).
ASSUMED_INPUT_BLUR = 0.5
# Pixels near the octave border are never keypoint candidates.
IMG_BORDER = 5
# Subpixel refinement gives up after this many re-centerings.
MAX_REFINE_STEPS = 5
# Orientation histogram setup.
N_ORI_BINS = 36
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0
ORI_PEAK_RATIO = 0.8
# Descriptor geometry: 4x4 spatial cells, 8 orientation bins, 128 values.
DESCR_GRID = 4
DESCR_ORI_BINS = 8
DESCR_SCALE_FACTOR = 3.0
DESCR_CLAMP = 0.2


@dataclass(frozen=True)
class SiftParams:
    """Knobs for the whole feature pipeline."""

    intervals: int = 3
    base_sigma: float = 1.6
    n_octaves: int | None = None
    contrast_thresh: float = 0.03
    edge_ratio: float = 10.0
    match_ratio: float = 0.8

    def __post_init__(self):
        if self.intervals < 1:
            raise ValueError("intervals must be >= 1")
        if self.base_sigma <= ASSUMED_INPUT_BLUR:
            raise ValueError(f"base_sigma must exceed {ASSUMED_INPUT_BLUR}")
        if self.contrast_thresh < 0.0:
            raise ValueError("contrast_thresh must be non-negative")
        if self.edge_ratio < 1.0:
            raise ValueError("edge_ratio must be >= 1")
        if not 0.0 < self.match_ratio <= 1.0:
            raise ValueError("match_ratio must lie in (0, 1]")
        if self.n_octaves is not None and self.n_octaves < 1:
            raise ValueError("n_octaves must be >= 1 when given")


@dataclass(frozen=True)
class Keypoint:
    """Refined extremum: subpixel position, scale, orientation, DoG response."""

    x: float
    y: float
    sigma: float
    orientation: float
    response: float


@dataclass(frozen=True)
class ScaleSpace:
    """Per-octave Gaussian stacks and their difference stacks."""

    gaussians: tuple[np.ndarray, ...]
    dogs: tuple[np.ndarray, ...]
    params: SiftParams
    input_shape: tuple[int, int]

    @property
    def n_octaves(self) -> int:
        return len(self.gaussians)

    def sigma_of(self, octave: int, layer: float) -> float:
        """Absolute scale (in input pixels) of a stack layer."""
        p = self.params
        return p.base_sigma * (2.0 ** (octave + layer / p.intervals))


@dataclass(frozen=True)
class MatchSet:
    """Accepted matches (query_idx, target_idx, distance); target indices unique."""

    pairs: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        targets = [j for _, j, _ in self.pairs]
        if len(set(targets)) != len(targets):
            raise ValueError("duplicate target index in match set")

    @property
    def count(self) -> int:
        return len(self.pairs)


def default_n_octaves(h: int, w: int) -> int:
    return max(1, int(math.floor(math.log2(min(h, w)))) - 2)


def build_scale_space(image: Image | np.ndarray, params: SiftParams = SiftParams()) -> ScaleSpace:
    """Stack of progressively blurred and downsampled luminance planes."""
    if isinstance(image, Image):
        gray = gray_array(image)
    else:
        gray = np.asarray(image, dtype=np.float64)
        if gray.ndim == 3 and gray.shape[2] == 1:
            gray = gray[:, :, 0]
        if gray.ndim != 2:
            raise ValueError("expected a grayscale plane or an Image")
    h, w = gray.shape
    if min(h, w) < 16:
        raise ValueError(f"image too small for scale space: {h}x{w}")

    n_octaves = params.n_octaves or default_n_octaves(h, w)
    # Every octave must keep room for a 3x3x3 neighborhood.
    n_octaves = min(n_octaves, max(1, int(math.floor(math.log2(min(h, w) / 8.0))) + 1))

    L = params.intervals
    k = 2.0 ** (1.0 / L)
    level_sigmas = [params.base_sigma * (k ** i) for i in range(L + 3)]

    gaussians: list[np.ndarray] = []
    dogs: list[np.ndarray] = []
    base = gray
    for octave in range(n_octaves):
        levels = np.empty((L + 3,) + base.shape, dtype=np.float64)
        if octave == 0:
            first_blur = math.sqrt(max(params.base_sigma ** 2 - ASSUMED_INPUT_BLUR ** 2, 0.01))
            levels[0] = ndimage.gaussian_filter(base, first_blur, mode="mirror")
        else:
            levels[0] = base
        for i in range(1, L + 3):
            inc = math.sqrt(level_sigmas[i] ** 2 - level_sigmas[i - 1] ** 2)
            levels[i] = ndimage.gaussian_filter(levels[i - 1], inc, mode="mirror")
        gaussians.append(levels)
        dogs.append(levels[1:] - levels[:-1])
        # Level L carries blur 2*base_sigma: decimating it seeds the next octave.
        base = levels[L][::2, ::2]
    return ScaleSpace(tuple(gaussians), tuple(dogs), params, (h, w))


def _refine_candidate(dog: np.ndarray, layer: int, i: int, j: int, params: SiftParams):
    """Quadratic subpixel fit; returns (layer, i, j, offset, value) or None."""
    n_layers, h, w = dog.shape
    L = params.intervals
    for _ in range(MAX_REFINE_STEPS):
        cube = dog[layer - 1:layer + 2, i - 1:i + 2, j - 1:j + 2]
        g = 0.5 * np.array([
            cube[1, 1, 2] - cube[1, 1, 0],
            cube[1, 2, 1] - cube[1, 0, 1],
            cube[2, 1, 1] - cube[0, 1, 1],
        ])
        c = cube[1, 1, 1]
        dxx = cube[1, 1, 2] - 2 * c + cube[1, 1, 0]
        dyy = cube[1, 2, 1] - 2 * c + cube[1, 0, 1]
        dss = cube[2, 1, 1] - 2 * c + cube[0, 1, 1]
        dxy = 0.25 * (cube[1, 2, 2] - cube[1, 2, 0] - cube[1, 0, 2] + cube[1, 0, 0])
        dxs = 0.25 * (cube[2, 1, 2] - cube[2, 1, 0] - cube[0, 1, 2] + cube[0, 1, 0])
        dys = 0.25 * (cube[2, 2, 1] - cube[2, 0, 1] - cube[0, 2, 1] + cube[0, 0, 1])
        H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            value = c + 0.5 * float(np.dot(g, offset))
            return layer, i, j, offset, value
        j += int(round(offset[0]))
        i += int(round(offset[1]))
        layer += int(round(offset[2]))
        if (layer < 1 or layer > L or i < IMG_BORDER or i >= h - IMG_BORDER
                or j < IMG_BORDER or j >= w - IMG_BORDER):
            return None
    return None


def _passes_edge_test(dog: np.ndarray, layer: int, i: int, j: int, edge_ratio: float) -> bool:
    plane = dog[layer]
    c = plane[i, j]
    dxx = plane[i, j + 1] - 2 * c + plane[i, j - 1]
    dyy = plane[i + 1, j] - 2 * c + plane[i - 1, j]
    dxy = 0.25 * (plane[i + 1, j + 1] - plane[i + 1, j - 1]
                  - plane[i - 1, j + 1] + plane[i - 1, j - 1])
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    if det <= 0:
        return False
    return tr * tr * edge_ratio < (edge_ratio + 1.0) ** 2 * det


def _orientation_angles(gauss_plane: np.ndarray, x: float, y: float, sigma_rel: float):
    """Histogram peaks (>= 0.8 of max) around a point; radians in [0, 2pi)."""
    h, w = gauss_plane.shape
    sig = ORI_SIGMA_FACTOR * sigma_rel
    radius = max(1, int(round(ORI_RADIUS_FACTOR * sig)))
    cx, cy = int(round(x)), int(round(y))
    y0, y1 = max(cy - radius, 1), min(cy + radius, h - 2)
    x0, x1 = max(cx - radius, 1), min(cx + radius, w - 2)
    if y0 >= y1 or x0 >= x1:
        return []
    win = gauss_plane[y0 - 1:y1 + 2, x0 - 1:x1 + 2]
    gx = 0.5 * (win[1:-1, 2:] - win[1:-1, :-2])
    gy = 0.5 * (win[2:, 1:-1] - win[:-2, 1:-1])
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    weight = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sig * sig))
    bins = np.minimum((ang * N_ORI_BINS / (2.0 * np.pi)).astype(int), N_ORI_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=(mag * weight).ravel(), minlength=N_ORI_BINS)
    # 5-tap circular smoothing (1 4 6 4 1)/16.
    sm = (6 * hist + 4 * (np.roll(hist, 1) + np.roll(hist, -1))
          + np.roll(hist, 2) + np.roll(hist, -2)) / 16.0
    peak = sm.max()
    if peak <= 0:
        return []
    angles = []
    for b in range(N_ORI_BINS):
        left, right = sm[(b - 1) % N_ORI_BINS], sm[(b + 1) % N_ORI_BINS]
        if sm[b] > left and sm[b] > right and sm[b] >= ORI_PEAK_RATIO * peak:
            # Parabolic interpolation of the peak bin.
            shift = 0.5 * (left - right) / (left - 2 * sm[b] + right)
            angle = (b + shift) * 2.0 * np.pi / N_ORI_BINS
            angles.append(angle % (2.0 * np.pi))
    return angles


def detect_keypoints(space: ScaleSpace, contrast_thresh: float | None = None,
                     edge_ratio: float | None = None) -> list[Keypoint]:
    """Refined DoG extrema with orientation; first/last DoG layers excluded."""
    params = space.params
    contrast = params.contrast_thresh if contrast_thresh is None else contrast_thresh
    edge = params.edge_ratio if edge_ratio is None else edge_ratio
    L = params.intervals
    prefilter = 0.5 * contrast / L

    keypoints: list[Keypoint] = []
    seen: set[tuple[float, float, float, float]] = set()
    for octave, dog in enumerate(space.dogs):
        n_layers, h, w = dog.shape
        if h <= 2 * IMG_BORDER or w <= 2 * IMG_BORDER:
            continue
        fmax = ndimage.maximum_filter(dog, size=3, mode="nearest")
        fmin = ndimage.minimum_filter(dog, size=3, mode="nearest")
        cand = ((dog >= fmax) & (dog > prefilter)) | ((dog <= fmin) & (dog < -prefilter))
        cand[0, :, :] = cand[-1, :, :] = False
        cand[:, :IMG_BORDER, :] = cand[:, h - IMG_BORDER:, :] = False
        cand[:, :, :IMG_BORDER] = cand[:, :, w - IMG_BORDER:] = False
        scale_mult = 2.0 ** octave
        for layer, i, j in np.argwhere(cand):
            refined = _refine_candidate(dog, int(layer), int(i), int(j), params)
            if refined is None:
                continue
            rl, ri, rj, offset, value = refined
            if abs(value) * L < contrast:
                continue
            if not _passes_edge_test(dog, rl, ri, rj, edge):
                continue
            x_o = rj + offset[0]
            y_o = ri + offset[1]
            layer_f = rl + offset[2]
            sigma_rel = params.base_sigma * (2.0 ** (layer_f / L))
            gauss_layer = min(max(int(round(layer_f)), 1), L)
            for angle in _orientation_angles(space.gaussians[octave][gauss_layer],
                                             x_o, y_o, sigma_rel):
                kp = Keypoint(
                    x=float(x_o * scale_mult),
                    y=float(y_o * scale_mult),
                    sigma=float(sigma_rel * scale_mult),
                    orientation=float(angle),
                    response=float(abs(value)),
                )
                key = (kp.x, kp.y, kp.sigma, kp.orientation)
                if key not in seen:
                    seen.add(key)
                    keypoints.append(kp)
    return keypoints


def _locate_octave(space: ScaleSpace, kp: Keypoint) -> tuple[int, int, float]:
    """Recover (octave, gaussian layer, octave-relative sigma) from kp.sigma."""
    p = space.params
    t = math.log2(kp.sigma / p.base_sigma) * p.intervals
    octave = int(math.floor((t - 0.5) / p.intervals))
    octave = min(max(octave, 0), space.n_octaves - 1)
    layer_f = t - octave * p.intervals
    layer = min(max(int(round(layer_f)), 1), p.intervals)
    sigma_rel = kp.sigma / (2.0 ** octave)
    return octave, layer, sigma_rel


def compute_descriptors(space: ScaleSpace, keypoints: list[Keypoint],
                        params: SiftParams | None = None) -> tuple[np.ndarray, list[int]]:
    """128-dim unit descriptors; returns (array, indices of surviving keypoints)."""
    d = DESCR_GRID
    n_bins = DESCR_ORI_BINS
    grads: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    out: list[np.ndarray] = []
    kept: list[int] = []
    for idx, kp in enumerate(keypoints):
        octave, layer, sigma_rel = _locate_octave(space, kp)
        plane = space.gaussians[octave][layer]
        h, w = plane.shape
        x = kp.x / (2.0 ** octave)
        y = kp.y / (2.0 ** octave)
        hist_width = DESCR_SCALE_FACTOR * sigma_rel
        # Drop rule: the 4x4 cell grid itself must fit in the plane. The wider
        # sampling halo (rotation margin) is clipped at the border instead.
        grid_half = hist_width * d / 2.0
        if (x - grid_half < 1 or x + grid_half > w - 2
                or y - grid_half < 1 or y + grid_half > h - 2):
            continue  # window exits the octave plane
        radius = int(round(hist_width * math.sqrt(2) * (d + 1) * 0.5))
        key = (octave, layer)
        if key not in grads:
            gx = np.zeros_like(plane)
            gy = np.zeros_like(plane)
            gx[:, 1:-1] = 0.5 * (plane[:, 2:] - plane[:, :-2])
            gy[1:-1, :] = 0.5 * (plane[2:, :] - plane[:-2, :])
            grads[key] = (np.hypot(gx, gy), np.mod(np.arctan2(gy, gx), 2.0 * np.pi))
        mag_plane, ang_plane = grads[key]

        cx, cy = int(round(x)), int(round(y))
        y0, y1 = max(cy - radius, 1), min(cy + radius, h - 2)
        x0, x1 = max(cx - radius, 1), min(cx + radius, w - 2)
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        dx = xx - x
        dy = yy - y
        cos_t, sin_t = math.cos(kp.orientation), math.sin(kp.orientation)
        x_rot = (cos_t * dx + sin_t * dy) / hist_width
        y_rot = (-sin_t * dx + cos_t * dy) / hist_width
        row_bin = y_rot + 0.5 * d - 0.5
        col_bin = x_rot + 0.5 * d - 0.5
        inside = (row_bin > -1) & (row_bin < d) & (col_bin > -1) & (col_bin < d)
        if not inside.any():
            continue
        rb = row_bin[inside]
        cb = col_bin[inside]
        mag = mag_plane[yy[inside], xx[inside]]
        ang = ang_plane[yy[inside], xx[inside]]
        weight = np.exp(-(x_rot[inside] ** 2 + y_rot[inside] ** 2) / (0.5 * d * d))
        ob = np.mod(ang - kp.orientation, 2.0 * np.pi) * n_bins / (2.0 * np.pi)

        hist = np.zeros((d + 2, d + 2, n_bins))
        r0 = np.floor(rb).astype(int)
        c0 = np.floor(cb).astype(int)
        o0 = np.floor(ob).astype(int)
        fr = rb - r0
        fc = cb - c0
        fo = ob - o0
        val = mag * weight
        for dr in (0, 1):
            wr = val * (fr if dr else 1 - fr)
            for dc in (0, 1):
                wc = wr * (fc if dc else 1 - fc)
                for do in (0, 1):
                    wo = wc * (fo if do else 1 - fo)
                    np.add.at(hist, (r0 + 1 + dr, c0 + 1 + dc, (o0 + do) % n_bins), wo)
        vec = hist[1:d + 1, 1:d + 1, :].ravel()
        norm = np.linalg.norm(vec)
        if norm <= 1e-12:
            continue
        vec = np.minimum(vec / norm, DESCR_CLAMP)
        norm = np.linalg.norm(vec)
        if norm <= 1e-12:
            continue
        out.append(vec / norm)
        kept.append(idx)
    if not out:
        return np.zeros((0, 128), dtype=np.float64), []
    return np.stack(out), kept


def match_descriptors(a: np.ndarray, b: np.ndarray, ratio: float = 0.8) -> MatchSet:
    """Lowe ratio matches from a into b; each target index used at most once."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or (a.size and a.shape[1] != 128) or (b.size and b.shape[1] != 128):
        if not (a.size == 0 or b.size == 0):
            raise ValueError("descriptors must be (n, 128) arrays")
    if len(a) == 0 or len(b) == 0:
        return MatchSet(())
    d2 = np.maximum(
        np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T),
        0.0,
    )
    dist = np.sqrt(d2)
    candidates: list[tuple[float, int, int]] = []
    if len(b) == 1:
        # No second neighbor exists: the ratio test degenerates to nearest-only.
        for i in range(len(a)):
            candidates.append((float(dist[i, 0]), i, 0))
    else:
        two = np.argpartition(dist, 1, axis=1)[:, :2]
        for i in range(len(a)):
            j0, j1 = two[i]
            if dist[i, j0] > dist[i, j1]:
                j0, j1 = j1, j0
            if dist[i, j0] < ratio * dist[i, j1]:
                candidates.append((float(dist[i, j0]), i, int(j0)))
    taken: set[int] = set()
    pairs: list[tuple[int, int, float]] = []
    for d, i, j in sorted(candidates, key=lambda t: (t[0], t[1])):
        if j not in taken:
            taken.add(j)
            pairs.append((i, j, d))
    pairs.sort(key=lambda t: t[0])
    return MatchSet(tuple(pairs))


def extract_features(image: Image | np.ndarray,
                     params: SiftParams = SiftParams()) -> tuple[list[Keypoint], np.ndarray]:
    """Keypoints (only those with descriptors) and their descriptor rows."""
    space = build_scale_space(image, params)
    kps = detect_keypoints(space)
    desc, kept = compute_descriptors(space, kps)
    return [kps[i] for i in kept], desc


def match_count(img_a: Image | np.ndarray, img_b: Image | np.ndarray,
                params: SiftParams = SiftParams()) -> int:
    """Number of ratio-test matches between two images' descriptor sets."""
    _, da = extract_features(img_a, params)
    _, db = extract_features(img_b, params)
    return match_descriptors(da, db, params.match_ratio).count
