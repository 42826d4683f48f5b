"""Shared primitives: images, boxes, class distributions, annotations."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# Rec. 601 luminance weights used for every RGB -> gray conversion.
LUM_WEIGHTS = (0.299, 0.587, 0.114)


class Image:
    """Immutable raster: float64 HxWxC array with values in [0, 1], C in {1, 3}."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected HxWx1 or HxWx3 array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Image is immutable")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __repr__(self) -> str:
        return f"Image({self.height}x{self.width}x{self.channels})"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, x2/y2 exclusive."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate bbox ({self.x1},{self.y1},{self.x2},{self.y2})")
        if self.x1 < 0 or self.y1 < 0:
            raise ValueError("bbox coordinates must be non-negative")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def clip_to(self, img_w: int, img_h: int) -> "BBox":
        return BBox(
            max(0, min(self.x1, img_w - 1)),
            max(0, min(self.y1, img_h - 1)),
            max(1, min(self.x2, img_w)),
            max(1, min(self.y2, img_h)),
        )


def yolo_to_xyxy(yolo: tuple[float, float, float, float], img_w: int, img_h: int) -> BBox:
    """Convert a normalized (cx, cy, w, h) box to integer pixel corners."""
    cx, cy, w, h = (float(v) for v in yolo)
    if w <= 0.0 or h <= 0.0:
        raise ValueError(f"degenerate yolo box (w={w}, h={h})")
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"yolo component {name}={v} outside [0, 1]")
    x1 = int(round((cx - w / 2.0) * img_w))
    y1 = int(round((cy - h / 2.0) * img_h))
    x2 = int(round((cx + w / 2.0) * img_w))
    y2 = int(round((cy + h / 2.0) * img_h))
    x1, y1 = max(0, x1), max(0, y1)
    x2, y2 = min(img_w, x2), min(img_h, y2)
    if x1 >= x2 or y1 >= y2:
        raise ValueError(f"yolo box {yolo} collapses at {img_w}x{img_h}")
    return BBox(x1, y1, x2, y2)


def xyxy_to_yolo(bbox: BBox, img_w: int, img_h: int) -> tuple[float, float, float, float]:
    """Convert integer pixel corners to a normalized (cx, cy, w, h) tuple."""
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image dimensions must be positive")
    cx = (bbox.x1 + bbox.x2) / 2.0 / img_w
    cy = (bbox.y1 + bbox.y2) / 2.0 / img_h
    w = bbox.width / img_w
    h = bbox.height / img_h
    return (cx, cy, w, h)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint."""
    ix1, iy1 = max(a.x1, b.x1), max(a.y1, b.y1)
    ix2, iy2 = min(a.x2, b.x2), min(a.y2, b.y2)
    iw, ih = max(0, ix2 - ix1), max(0, iy2 - iy1)
    inter = iw * ih
    if inter == 0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


class ClassDistribution:
    """Non-negative mass over a fixed class registry (indices are class ids)."""

    __slots__ = ("mass",)

    def __init__(self, mass: np.ndarray):
        arr = np.asarray(mass, dtype=np.float64).ravel()
        if arr.size == 0:
            raise ValueError("distribution needs at least one class")
        if not np.all(np.isfinite(arr)):
            raise ValueError("distribution contains non-finite mass")
        if arr.min() < 0.0:
            raise ValueError("distribution mass must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "mass", arr)

    def __setattr__(self, name, value):
        raise AttributeError("ClassDistribution is immutable")

    @property
    def n_classes(self) -> int:
        return int(self.mass.size)

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    def normalize(self) -> "ClassDistribution":
        t = self.total
        if t <= 0.0:
            raise ValueError("cannot normalize zero-mass distribution")
        return ClassDistribution(self.mass / t)

    def argmax_class(self) -> int:
        # np.argmax returns the first maximum, which is the lowest class id.
        return int(np.argmax(self.mass))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClassDistribution):
            return NotImplemented
        return np.array_equal(self.mass, other.mass)

    def __repr__(self) -> str:
        return f"ClassDistribution({np.array2string(self.mass, precision=4)})"


@dataclass(frozen=True)
class ModelOutput:
    """Single detection: box, class decision, confidence, optional distribution."""

    bbox: BBox
    class_id: int
    confidence: float
    distribution: ClassDistribution | None = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.distribution is not None:
            if self.distribution.argmax_class() != self.class_id:
                raise ValueError(
                    "distribution argmax "
                    f"{self.distribution.argmax_class()} != class_id {self.class_id}"
                )


@dataclass(frozen=True)
class Annotation:
    """Ground-truth label for one scene."""

    label_id: int
    label_name: str
    bbox: BBox
    attributes: dict = field(default_factory=dict)


def to_grayscale(image: Image) -> Image:
    """Collapse RGB to single-channel luminance; pass 1-channel images through."""
    if image.channels == 1:
        return image
    r, g, b = LUM_WEIGHTS
    lum = r * image.data[:, :, 0] + g * image.data[:, :, 1] + b * image.data[:, :, 2]
    return Image(np.clip(lum, 0.0, 1.0))


def gray_array(image: Image) -> np.ndarray:
    """Luminance plane as a bare HxW float array."""
    return to_grayscale(image).data[:, :, 0]


def load_image(path: str | Path) -> Image:
    """Read an 8-bit raster file; values scaled to [0, 1]."""
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Image(arr)


def save_image(image: Image, path: str | Path) -> None:
    """Write an image as an 8-bit PNG (or whatever the extension names)."""
    arr = np.rint(image.data * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = PILImage.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = PILImage.fromarray(arr, mode="RGB")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)
