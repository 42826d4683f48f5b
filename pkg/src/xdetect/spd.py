"""Scene-processing detector: transform battery, re-query, aggregate.

Each transform produces a modified copy of the scene; the target model is
queried on every copy and the per-class distributions are summed. A patched
scene betrays itself when enough transforms break the patch's influence that
the aggregate flips away from the model's raw answer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .core import ClassDistribution, Image
from .models import TargetModel, lift_to_distribution

log = logging.getLogger(__name__)

TRANSFORM_KINDS = ("blur", "sharpen", "noise", "darken", "identity", "style_hook")
DIGITAL_BLUR = 6.0
PHYSICAL_BLUR = 12.0
SHARPEN_AMOUNT = 1.0
SHARPEN_RADIUS = 1.0
PHYSICAL_NOISE = 0.35
DARKEN_STRENGTH = 0.1

_STYLE_BACKENDS: dict[str, Callable[[Image, Image], Image]] = {}


@dataclass(frozen=True)
class TransformSpec:
    """One scene modification; noise must carry a seed for reproducibility."""

    kind: str
    strength: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "noise" and self.seed is None:
            raise ValueError("noise transform requires a seed")
        if self.kind == "blur" and self.strength < 1.0:
            raise ValueError("blur strength is a kernel width, must be >= 1")
        if self.kind == "darken" and not 0.0 <= self.strength < 1.0:
            raise ValueError("darken strength must lie in [0, 1)")


@dataclass(frozen=True)
class TransformSet:
    specs: tuple[TransformSpec, ...]

    def __post_init__(self):
        if len(set(self.specs)) != len(self.specs):
            raise ValueError("duplicate transform spec in set")
        if not self.specs:
            raise ValueError("transform set cannot be empty")


@dataclass(frozen=True)
class TransformRow:
    """Model answer under one transform; class None when nothing was detected."""

    spec: TransformSpec
    class_id: int | None
    confidence: float | None


@dataclass
class SpdResult:
    class_id: int | None
    aggregated: ClassDistribution | None
    rows: list[TransformRow]
    inconclusive: bool = False
    note: str = ""


def register_style_backend(name: str, fn: Callable[[Image, Image], Image]) -> None:
    if name in _STYLE_BACKENDS:
        raise ValueError(f"style backend {name!r} already registered")
    _STYLE_BACKENDS[name] = fn


def unregister_style_backend(name: str) -> None:
    _STYLE_BACKENDS.pop(name, None)


def style_backends() -> tuple[str, ...]:
    return tuple(_STYLE_BACKENDS)


def _box_width(strength: float) -> int:
    # Kernel widths are odd so the filter stays centered; evens round up.
    k = int(round(strength))
    return k if k % 2 == 1 else k + 1


def _per_channel(data: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(data[:, :, c]) for c in range(data.shape[2])], axis=2)


def apply_transform(image: Image, spec: TransformSpec) -> Image:
    """Deterministic scene modification; output values stay in [0, 1]."""
    data = image.data
    if spec.kind == "identity":
        return Image(data)
    if spec.kind == "blur":
        k = _box_width(spec.strength)
        out = _per_channel(data, lambda p: ndimage.uniform_filter(p, size=k, mode="nearest"))
    elif spec.kind == "sharpen":
        amount = spec.strength if spec.strength > 0 else SHARPEN_AMOUNT
        blurred = _per_channel(
            data, lambda p: ndimage.gaussian_filter(p, SHARPEN_RADIUS, mode="nearest"))
        out = data + amount * (data - blurred)
    elif spec.kind == "noise":
        rng = np.random.default_rng(spec.seed)
        out = data + rng.uniform(-spec.strength, spec.strength, size=data.shape)
    elif spec.kind == "darken":
        out = data * (1.0 - spec.strength)
    elif spec.kind == "style_hook":
        names = style_backends()
        if not names:
            raise RuntimeError("style_hook transform has no registered backend")
        # The scene serves as its own style source.
        return _STYLE_BACKENDS[names[0]](image, image)
    else:  # pragma: no cover - kinds validated at construction
        raise ValueError(spec.kind)
    return Image(np.clip(out, 0.0, 1.0))


def default_transform_set(space: str = "digital", noise_seed: int = 0) -> TransformSet:
    """Battery presets; style transfer degrades to identity when unavailable."""
    if space == "digital":
        specs = [
            TransformSpec("blur", DIGITAL_BLUR),
            TransformSpec("sharpen", SHARPEN_AMOUNT),
            TransformSpec("darken", DARKEN_STRENGTH),
        ]
    elif space == "physical":
        specs = [
            TransformSpec("blur", PHYSICAL_BLUR),
            TransformSpec("sharpen", SHARPEN_AMOUNT),
            TransformSpec("noise", PHYSICAL_NOISE, seed=noise_seed),
            TransformSpec("darken", DARKEN_STRENGTH),
        ]
    else:
        raise ValueError(f"unknown space {space!r}, expected digital or physical")
    if style_backends():
        specs.append(TransformSpec("style_hook"))
    else:
        log.warning("no style backend registered; style_hook degrades to identity")
        specs.append(TransformSpec("identity"))
    return TransformSet(tuple(specs))


def spd_classify(scene: Image, model: TargetModel,
                 transforms: TransformSet) -> SpdResult:
    """Argmax of the summed per-transform class distributions."""
    n = model.n_classes
    total = np.zeros(n)
    rows: list[TransformRow] = []
    for spec in transforms.specs:
        modified = apply_transform(scene, spec)
        out = model.predict(modified)
        if out is None:
            log.info("transform %s produced no detection", spec)
            rows.append(TransformRow(spec, None, None))
            continue
        dist = lift_to_distribution(out, n)
        total += dist.mass
        rows.append(TransformRow(spec, out.class_id, out.confidence))
    if total.sum() <= 0.0:
        return SpdResult(None, None, rows, inconclusive=True,
                         note="no transform produced a detection")
    aggregated = ClassDistribution(total).normalize()
    return SpdResult(aggregated.argmax_class(), aggregated, rows)
