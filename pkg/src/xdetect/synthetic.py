"""Procedural scene generator with known ground truth.

Produces small produce-counter style scenes: one textured object on a dark
uniform background, optionally stamped with a smooth high-saturation magenta
marker (the stand-in for a physical hijack patch). Every class has a fixed
texture field in object-local coordinates, so two instances of a class share
local appearance and feature matching across instances is meaningful.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Annotation, BBox, Image, save_image, xyxy_to_yolo

BACKGROUND = 0.08
MARKER_COLOR = (1.0, 0.0, 1.0)
DEFAULT_MARKER_SIGMA = 1.8
TEXTURE_DOTS = 110


@dataclass(frozen=True)
class ClassDef:
    """One object family: hue, elongation, and a texture seed."""

    name: str
    hue_deg: float
    aspect: float  # major/minor axis ratio, >= 1
    texture_seed: int

    @property
    def base_rgb(self) -> tuple[float, float, float]:
        return colorsys.hsv_to_rgb(self.hue_deg / 360.0, 0.85, 0.82)


@dataclass
class SceneSample:
    """Rendered scene plus everything the generator knows about it."""

    image: Image
    annotation: Annotation
    mask: np.ndarray  # bool HxW, true on object pixels
    class_id: int
    marker_center: tuple[float, float] | None = None


def default_world() -> tuple[ClassDef, ...]:
    """Four produce classes separated by >= 60 degrees of hue."""
    return (
        ClassDef("apple", 0.0, 1.15, 101),
        ClassDef("banana", 60.0, 2.6, 202),
        ClassDef("lime", 120.0, 1.1, 303),
        ClassDef("plum", 240.0, 1.2, 404),
    )


def texture_world(n_classes: int = 20, seed: int = 500) -> tuple[ClassDef, ...]:
    """Many texture families for library-scale tests; hues avoid magenta."""
    rng = np.random.default_rng(seed)
    defs = []
    for i in range(n_classes):
        hue = (i * 360.0 / n_classes) % 360.0
        if 280.0 <= hue <= 320.0:
            hue = (hue + 45.0) % 360.0
        aspect = 1.1 if i % 2 == 0 else 1.9
        defs.append(ClassDef(f"tex{i:02d}", hue, aspect, int(rng.integers(1, 10 ** 6))))
    return tuple(defs)


def _texture_field(texture_seed: int):
    """Dot parameters of a class texture in object-local [-1, 1] coordinates."""
    rng = np.random.default_rng(texture_seed)
    n = TEXTURE_DOTS
    pos = rng.uniform(-0.92, 0.92, size=(n, 2))
    sig = rng.uniform(0.04, 0.11, size=n)
    chroma_amp = rng.uniform(-0.16, 0.12, size=n)
    # Equal-channel amplitude: luminance contrast that leaves hue untouched.
    gray_amp = rng.uniform(-0.20, 0.24, size=n)
    return pos, sig, chroma_amp, gray_amp


def _sample_texture(u: np.ndarray, v: np.ndarray, texture_seed: int):
    """Multiplicative chroma field and additive achromatic field at (u, v)."""
    pos, sig, chroma_amp, gray_amp = _texture_field(texture_seed)
    t = np.full(u.shape, 0.88)
    g = np.zeros(u.shape)
    for (du, dv), s, ca, ga in zip(pos, sig, chroma_amp, gray_amp):
        dot = np.exp(-((u - du) ** 2 + (v - dv) ** 2) / (2 * s * s))
        t += ca * dot
        g += ga * dot
    return np.clip(t, 0.55, 1.0), np.clip(g, -0.28, 0.30)


def render_scene(
    world: tuple[ClassDef, ...],
    class_id: int,
    seed: int,
    size: tuple[int, int] = (160, 224),
    radius_frac: float = 0.225,
    centered: bool = False,
    marker: bool = False,
    marker_sigma: float = DEFAULT_MARKER_SIGMA,
    decal_frac: float = 0.0,
) -> SceneSample:
    """One object instance on a dark background; fully deterministic per seed."""
    cdef = world[class_id]
    rng = np.random.default_rng(seed)
    h, w = size
    radius = radius_frac * min(h, w) * rng.uniform(0.9, 1.15)
    theta = math.radians(rng.uniform(-8.0, 8.0))
    brightness = rng.uniform(0.92, 1.08)
    # Semi-axes in pixels; area preserved across aspect ratios.
    a_ax = radius * math.sqrt(cdef.aspect)
    b_ax = radius / math.sqrt(cdef.aspect)
    margin_x = a_ax + 6
    margin_y = a_ax + 6
    if centered:
        cx, cy = w / 2.0, h / 2.0
    else:
        cx = rng.uniform(margin_x, w - margin_x)
        cy = rng.uniform(margin_y, h - margin_y)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    lu = (math.cos(theta) * dx + math.sin(theta) * dy) / a_ax
    lv = (-math.sin(theta) * dx + math.cos(theta) * dy) / b_ax
    mask = lu ** 2 + lv ** 2 <= 1.0
    if not mask.any():
        raise ValueError("object fell outside the frame")

    img = np.full((h, w, 3), BACKGROUND)
    tex, gray = _sample_texture(lu[mask], lv[mask], cdef.texture_seed)
    base = np.array(cdef.base_rgb)
    body = base[None, :] * (tex * brightness)[:, None] + gray[:, None]
    img[mask] = np.clip(body, 0.02, 1.0)

    if decal_frac > 0.0:
        # High-frequency clutter covering <= decal_frac of the object area.
        area = float(mask.sum())
        side = int(math.sqrt(min(decal_frac, 0.25) * area))
        dcx = int(cx + 0.35 * a_ax * math.cos(theta))
        dcy = int(cy + 0.35 * a_ax * math.sin(theta))
        x0, y0 = max(0, dcx - side // 2), max(0, dcy - side // 2)
        x1, y1 = min(w, x0 + side), min(h, y0 + side)
        drng = np.random.default_rng(seed + 77)
        img[y0:y1, x0:x1] = drng.uniform(0.1, 0.9, size=(y1 - y0, x1 - x0, 3))

    marker_center = None
    if marker:
        # Smooth magenta blend near the upper-left of the object: high
        # saturation, no fine structure, so it adds almost no feature mass.
        mx = cx - 0.52 * a_ax * math.cos(theta) + 0.3 * b_ax * math.sin(theta)
        my = cy - 0.52 * a_ax * math.sin(theta) - 0.3 * b_ax * math.cos(theta)
        m = np.exp(-((xx - mx) ** 2 + (yy - my) ** 2) / (2 * marker_sigma ** 2))
        img = (1.0 - m[:, :, None]) * img + m[:, :, None] * np.array(MARKER_COLOR)
        marker_center = (float(mx), float(my))

    ys, xs = np.nonzero(mask)
    bbox = BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    ann = Annotation(class_id, cdef.name, bbox, _attributes(rng))
    return SceneSample(Image(np.clip(img, 0.0, 1.0)), ann, mask, class_id, marker_center)


def _attributes(rng: np.random.Generator) -> dict:
    return {
        "light": "true" if rng.random() < 0.8 else "false",
        "expensive": "false",
        "hand_location": str(rng.choice(["top", "side", "bottom"])),
        "background": str(rng.choice(["office", "products"])),
        "visual_angle": str(rng.choice(["left", "straight", "right"])),
    }


def render_prototype(world: tuple[ClassDef, ...], class_id: int, seed: int,
                     size: tuple[int, int] = (128, 128)) -> SceneSample:
    """Object-centric view used to build prototype libraries."""
    return render_scene(world, class_id, seed, size=size, radius_frac=0.36, centered=True)


def prototype_images(world: tuple[ClassDef, ...], class_id: int, n: int,
                     seed0: int = 9000) -> list[Image]:
    return [render_prototype(world, class_id, seed0 + 31 * class_id + i).image
            for i in range(n)]


def build_corpus(
    out_dir: str | Path,
    world: tuple[ClassDef, ...] | None = None,
    n_benign: int = 50,
    n_adversarial: int = 50,
    seed: int = 0,
    size: tuple[int, int] = (160, 224),
    hijack_class: int = 3,
) -> Path:
    """Write scene rasters plus a manifest; patched scenes avoid the hijack class.

    Returns the manifest path. Adversarial entries carry the marker and are
    labeled with the true object class; `is_adversarial` records ground truth.
    """
    world = world or default_world()
    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    benign_classes = [i for i in range(len(world))]
    patched_classes = [i for i in range(len(world)) if i != hijack_class]
    entries = []
    idx = 0
    for kind, count, classes in (("benign", n_benign, benign_classes),
                                 ("marker", n_adversarial, patched_classes)):
        for i in range(count):
            cls = classes[i % len(classes)]
            sample = render_scene(world, cls, seed=seed + 1000 * (kind == "marker") + i,
                                  size=size, marker=(kind == "marker"))
            rel = f"scenes/scene_{idx:04d}.png"
            save_image(sample.image, out_dir / rel)
            entries.append({
                "image": rel,
                "label_id": sample.class_id,
                "label_name": world[sample.class_id].name,
                "bbox_yolo": list(xyxy_to_yolo(sample.annotation.bbox,
                                               sample.image.width, sample.image.height)),
                "is_adversarial": kind == "marker",
                "attack_id": "marker_hijack" if kind == "marker" else None,
                "attributes": sample.annotation.attributes,
            })
            idx += 1
    manifest = {
        "schema": "superstore",
        "classes": [c.name for c in world],
        "entries": entries,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path
