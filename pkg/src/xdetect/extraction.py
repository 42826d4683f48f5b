"""Object extraction: isolate the detected object before prototype matching.

Three methods behind one spec: crop the (padded) model box, separate the
object from a near-uniform background by color distance, or delegate to a
registered external segmenter. The returned crop always has background
pixels exactly zero so downstream feature counts measure the object alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from .core import BBox, Image, ModelOutput

log = logging.getLogger(__name__)

KNOWN_METHODS = ("bbox_crop", "background_diff", "external_hook")
DEFAULT_PADDING_FRAC = 0.05
DEFAULT_DIFF_THRESHOLD = 0.15
DEFAULT_BORDER_PX = 2
MIN_FOREGROUND_FRAC = 0.01

_EXTERNAL_EXTRACTORS: dict[str, Callable[[Image, BBox], np.ndarray]] = {}


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractorSpec:
    """Method name plus free-form parameters."""

    method: str = "background_diff"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in KNOWN_METHODS:
            raise ValueError(f"unknown extraction method {self.method!r}")


@dataclass(frozen=True)
class ExtractionMask:
    """Boolean foreground plane aligned with the source scene."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.dtype != np.bool_ or m.ndim != 2:
            raise ValueError("mask must be a 2-d boolean array")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def foreground_count(self) -> int:
        return int(self.mask.sum())


def register_extractor(name: str, fn: Callable[[Image, BBox], np.ndarray]) -> None:
    """Install an external segmentation backend; duplicate names are rejected."""
    if name in _EXTERNAL_EXTRACTORS:
        raise ValueError(f"extractor {name!r} already registered")
    _EXTERNAL_EXTRACTORS[name] = fn


def unregister_extractor(name: str) -> None:
    _EXTERNAL_EXTRACTORS.pop(name, None)


def padded_bbox(bbox: BBox, img_w: int, img_h: int,
                padding_frac: float = DEFAULT_PADDING_FRAC) -> BBox:
    """Grow a box by a fraction of its own size on each side, clipped to the image."""
    px = int(round(padding_frac * bbox.width))
    py = int(round(padding_frac * bbox.height))
    return BBox(
        max(0, bbox.x1 - px),
        max(0, bbox.y1 - py),
        min(img_w, bbox.x2 + px),
        min(img_h, bbox.y2 + py),
    )


def _background_diff_mask(scene: Image, spec: ExtractorSpec) -> np.ndarray:
    threshold = float(spec.params.get("threshold", DEFAULT_DIFF_THRESHOLD))
    border = int(spec.params.get("border_px", DEFAULT_BORDER_PX))
    data = scene.data
    h, w = data.shape[:2]
    strip = np.concatenate([
        data[:border, :, :].reshape(-1, data.shape[2]),
        data[h - border:, :, :].reshape(-1, data.shape[2]),
        data[:, :border, :].reshape(-1, data.shape[2]),
        data[:, w - border:, :].reshape(-1, data.shape[2]),
    ])
    bg_color = np.median(strip, axis=0)
    dist = np.sqrt(np.sum((data - bg_color[None, None, :]) ** 2, axis=2))
    raw = dist > threshold
    structure = np.ones((3, 3), dtype=bool)
    cleaned = ndimage.binary_closing(ndimage.binary_opening(raw, structure), structure)
    if not cleaned.any():
        return cleaned
    labels, n = ndimage.label(cleaned)
    if n <= 1:
        return cleaned
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def foreground_mask(scene: Image, bbox: BBox, spec: ExtractorSpec) -> ExtractionMask:
    """Scene-sized foreground mask computed per `spec.method`."""
    h, w = scene.height, scene.width
    box = padded_bbox(bbox.clip_to(w, h), w, h,
                      float(spec.params.get("padding_frac", DEFAULT_PADDING_FRAC)))
    if spec.method == "bbox_crop":
        mask = np.zeros((h, w), dtype=bool)
        mask[box.y1:box.y2, box.x1:box.x2] = True
    elif spec.method == "background_diff":
        mask = _background_diff_mask(scene, spec)
    else:
        name = spec.params.get("name")
        if name not in _EXTERNAL_EXTRACTORS:
            raise ExtractionError(f"no external extractor registered under {name!r}")
        raw = np.asarray(_EXTERNAL_EXTRACTORS[name](scene, box))
        if raw.shape != (h, w):
            raise ExtractionError(
                f"external extractor returned shape {raw.shape}, scene is {(h, w)}")
        mask = raw.astype(bool)
    return ExtractionMask(mask)


def extract_object(scene: Image, model_output: ModelOutput,
                   spec: ExtractorSpec = ExtractorSpec()) -> Image:
    """Cropped object with background exactly 0.

    The crop window is the padded model box; foreground selection inside the
    window follows `spec.method`. Raises ExtractionError when the method
    finds (nearly) nothing.
    """
    h, w = scene.height, scene.width
    box = padded_bbox(model_output.bbox.clip_to(w, h), w, h,
                      float(spec.params.get("padding_frac", DEFAULT_PADDING_FRAC)))
    em = foreground_mask(scene, model_output.bbox, spec)
    crop_mask = em.mask[box.y1:box.y2, box.x1:box.x2]
    if not crop_mask.any():
        raise ExtractionError("extraction produced no object")
    crop = scene.data[box.y1:box.y2, box.x1:box.x2].copy()
    crop[~crop_mask] = 0.0
    if crop_mask.sum() < MIN_FOREGROUND_FRAC * crop_mask.size:
        raise ExtractionError("extraction produced no object")
    return Image(crop)
