"""Patch crafting: signed-gradient updates under expectation over transforms.

The update is P <- clip(P - eps * sign(mean gradient)), where the mean runs
over random placement draws (rotation, brightness) and, in the adaptive
variants, over scene-processing transforms applied after placement or a
zeroth-order estimate of the feature-match penalty. The placement map is
nearest-neighbor, so its adjoint is an exact scatter-add; the clip is
treated as straight-through when mapping gradients back.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BBox, Image, ModelOutput, iou, load_image, save_image
from .extraction import ExtractionError, ExtractorSpec, extract_object
from .models import LossSpec, PredictionError, TargetModel
from .oed import PrototypeEntry
from .sift import SiftParams, extract_features, match_descriptors
from .spd import SHARPEN_RADIUS, TransformSet, TransformSpec, _box_width

log = logging.getLogger(__name__)

ADAPTIVE_MODES = ("none", "oe_sift", "scene_processing", "ensemble")
SP_CRAFT_KINDS = ("blur", "sharpen", "noise", "darken", "identity")
MIN_PATCH_SIDE = 8
ZO_DELTA = 0.05


@dataclass(frozen=True)
class Patch:
    """Square adversarial sticker, intensities in [0, 1]."""

    image: Image

    def __post_init__(self):
        if self.image.height != self.image.width:
            raise ValueError("patch must be square")
        if self.image.height < MIN_PATCH_SIDE:
            raise ValueError(f"patch side must be >= {MIN_PATCH_SIDE}")

    @property
    def side(self) -> int:
        return self.image.height

    @property
    def data(self) -> np.ndarray:
        return self.image.data


def gray_patch(side: int, value: float = 0.5, channels: int = 3) -> Patch:
    return Patch(Image(np.full((side, side, channels), value)))


@dataclass(frozen=True)
class PlacementSpec:
    """How the patch lands on the target object."""

    anchor: tuple[float, float] = (0.5, 0.5)
    scale: float = 0.45
    rotation_range: tuple[float, float] = (-20.0, 20.0)
    brightness_range: tuple[float, float] = (0.8, 1.6)

    def __post_init__(self):
        if not (0.0 < self.scale <= 1.0):
            raise ValueError("scale must lie in (0, 1]")
        lo, hi = self.brightness_range
        if not (0.5 <= lo <= hi <= 2.0):
            raise ValueError("brightness range must lie within [0.5, 2.0]")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError("rotation range reversed")
        ax, ay = self.anchor
        if not (0.0 <= ax <= 1.0 and 0.0 <= ay <= 1.0):
            raise ValueError("anchor must lie inside the bbox")


@dataclass(frozen=True)
class PlacementDraw:
    rotation_deg: float
    brightness: float


NEUTRAL_DRAW = PlacementDraw(0.0, 1.0)


def sample_draw(placement: PlacementSpec, rng: np.random.Generator) -> PlacementDraw:
    rot = rng.uniform(*placement.rotation_range)
    bright = rng.uniform(*placement.brightness_range)
    return PlacementDraw(float(rot), float(bright))


@dataclass(frozen=True)
class PatchedScene:
    """Composited scene plus the pixel map needed for the adjoint."""

    image: Image
    draw: PlacementDraw
    scene_rows: np.ndarray
    scene_cols: np.ndarray
    patch_rows: np.ndarray
    patch_cols: np.ndarray
    patch_shape: tuple[int, int, int]

    def patch_gradient(self, scene_grad: np.ndarray) -> np.ndarray:
        """Pull a scene-pixel gradient back onto patch pixels (clip ignored)."""
        if scene_grad.shape != self.image.data.shape:
            raise ValueError("gradient shape does not match the scene")
        out = np.zeros(self.patch_shape)
        np.add.at(out, (self.patch_rows, self.patch_cols),
                  self.draw.brightness * scene_grad[self.scene_rows, self.scene_cols])
        return out


def apply_patch(
    scene: Image,
    patch: Patch,
    bbox: BBox,
    placement: PlacementSpec = PlacementSpec(),
    rng: np.random.Generator | int | None = None,
    draw: PlacementDraw | None = None,
) -> PatchedScene:
    """Composite the patch into the bbox under one placement draw.

    The patch covers scale * min(bbox side) pixels, centered on the anchor,
    rotated and brightness-scaled per the draw, nearest-neighbor resampled.
    A footprint that does not fit the scene is shrunk with a warning.
    """
    if scene.channels != patch.image.channels:
        raise ValueError("patch and scene channel counts differ")
    if draw is None:
        gen = rng if isinstance(rng, np.random.Generator) \
            else np.random.default_rng(rng)
        draw = sample_draw(placement, gen)

    ax, ay = placement.anchor
    cx = bbox.x1 + ax * bbox.width
    cy = bbox.y1 + ay * bbox.height
    side = int(round(placement.scale * min(bbox.width, bbox.height)))
    fit = int(min(2 * min(cx, scene.width - cx), 2 * min(cy, scene.height - cy)))
    if side > fit:
        log.warning("patch footprint %d does not fit the scene; scaled down to %d",
                    side, fit)
        side = fit
    if side < 2:
        raise ValueError("bbox too small to hold a patch")

    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    x0 = max(0, min(x0, scene.width - side))
    y0 = max(0, min(y0, scene.height - side))

    # Inverse-rotate each footprint pixel into patch coordinates.
    ys, xs = np.mgrid[y0:y0 + side, x0:x0 + side]
    u = (xs - x0 + 0.5) - side / 2.0
    v = (ys - y0 + 0.5) - side / 2.0
    theta = math.radians(draw.rotation_deg)
    ur = math.cos(theta) * u + math.sin(theta) * v
    vr = -math.sin(theta) * u + math.cos(theta) * v
    half = side / 2.0
    inside = (np.abs(ur) <= half) & (np.abs(vr) <= half)

    pscale = patch.side / side
    pc = np.clip(np.floor((ur + half) * pscale), 0, patch.side - 1).astype(int)
    pr = np.clip(np.floor((vr + half) * pscale), 0, patch.side - 1).astype(int)

    srows = ys[inside]
    scols = xs[inside]
    prows = pr[inside]
    pcols = pc[inside]

    data = scene.data.copy()
    data[srows, scols] = np.clip(draw.brightness * patch.data[prows, pcols], 0.0, 1.0)
    return PatchedScene(Image(data), draw, srows, scols, prows, pcols,
                        patch.data.shape)


# ------------------------------------------------------------- transform math


def transform_adjoint(grad: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Pull a gradient back through one scene-processing transform.

    Box blur and the unsharp kernel are symmetric, so away from the borders
    the adjoint is the filter itself; darken and brightness are scalar maps;
    an additive noise draw is the identity.
    """
    if spec.kind == "identity" or spec.kind == "noise":
        return grad
    if spec.kind == "darken":
        return grad * (1.0 - spec.strength)
    if spec.kind == "blur":
        k = _box_width(spec.strength)
        return np.stack([ndimage.uniform_filter(grad[:, :, c], size=k, mode="nearest")
                         for c in range(grad.shape[2])], axis=2)
    if spec.kind == "sharpen":
        amount = spec.strength if spec.strength > 0 else 1.0
        sm = np.stack([ndimage.gaussian_filter(grad[:, :, c], SHARPEN_RADIUS,
                                               mode="nearest")
                       for c in range(grad.shape[2])], axis=2)
        return grad + amount * (grad - sm)
    raise ValueError(f"transform {spec.kind!r} has no adjoint for crafting")


def _apply_craft_transform(image: Image, spec: TransformSpec) -> Image:
    from .spd import apply_transform

    return apply_transform(image, spec)


# -------------------------------------------------------------- configuration


@dataclass(frozen=True)
class AttackConfig:
    """Crafting hyperparameters; adaptive knobs only where the mode uses them."""

    target_class: int
    epsilon: float = 0.02
    iterations: int = 50
    seed: int = 0
    eot_samples: int = 8
    adaptive_mode: str = "none"
    sp_transforms: TransformSet | None = None
    lambda_oe: float = 0.0
    zo_samples: int = 0

    def __post_init__(self):
        if self.target_class < 0:
            raise ValueError("target_class must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        if self.adaptive_mode not in ADAPTIVE_MODES:
            raise ValueError(f"unknown adaptive_mode {self.adaptive_mode!r}")
        sp_mode = self.adaptive_mode in ("scene_processing", "ensemble")
        oe_mode = self.adaptive_mode in ("oe_sift", "ensemble")
        if sp_mode:
            if self.sp_transforms is None:
                raise ValueError(f"{self.adaptive_mode} mode requires sp_transforms")
            bad = [s.kind for s in self.sp_transforms.specs
                   if s.kind not in SP_CRAFT_KINDS]
            if bad:
                raise ValueError(f"sp transform kinds {bad} cannot be crafted against")
        elif self.sp_transforms is not None:
            raise ValueError("sp_transforms is only used in scene-processing modes")
        if oe_mode:
            if self.zo_samples < 1:
                raise ValueError(f"{self.adaptive_mode} mode requires zo_samples >= 1")
            if self.lambda_oe < 0:
                raise ValueError("lambda_oe must be non-negative")
        else:
            if self.zo_samples != 0:
                raise ValueError("zo_samples is only used in feature-penalty modes")
            if self.lambda_oe != 0.0:
                raise ValueError("lambda_oe is only used in feature-penalty modes")

    def config_hash(self) -> str:
        payload = {
            "target_class": self.target_class,
            "epsilon": self.epsilon,
            "iterations": self.iterations,
            "seed": self.seed,
            "eot_samples": self.eot_samples,
            "adaptive_mode": self.adaptive_mode,
            "sp_transforms": None if self.sp_transforms is None else [
                (s.kind, s.strength, s.seed) for s in self.sp_transforms.specs],
            "lambda_oe": self.lambda_oe,
            "zo_samples": self.zo_samples,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EotDraw:
    scene_index: int
    rotation_deg: float
    brightness: float
    transform: str | None = None


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    loss: float
    penalty: float
    draws: tuple[EotDraw, ...]


@dataclass(frozen=True)
class CraftResult:
    patch: Patch
    trace: tuple[TraceRow, ...]
    diverged: bool = False
    note: str = ""

    @property
    def final_loss(self) -> float | None:
        return self.trace[-1].loss if self.trace else None


# ------------------------------------------------------------------- the step


def _scene_bbox(model: TargetModel, scene: Image) -> BBox:
    out = model.predict(scene)
    if out is None:
        raise PredictionError("cannot place a patch: model finds no object")
    return out.bbox


def _eot_gradient(
    patch: Patch,
    scenes: list[Image],
    model: TargetModel,
    target_class: int,
    placement: PlacementSpec,
    rng: np.random.Generator,
    eot_samples: int,
    sp_transforms: TransformSet | None,
) -> tuple[np.ndarray, float, tuple[EotDraw, ...]]:
    """Mean patch gradient and loss over EOT draws.

    Draw order per sample is fixed: scene index, rotation, brightness, then
    the optional transform pick.
    """
    if not getattr(model, "has_gradient", False):
        raise PredictionError(f"{model.name} exposes no gradients; cannot craft")
    if not scenes:
        raise ValueError("scene batch is empty")
    loss_spec = LossSpec(target_class)

    grad_sum = np.zeros(patch.data.shape)
    loss_sum = 0.0
    draws: list[EotDraw] = []
    for _ in range(eot_samples):
        idx = int(rng.integers(len(scenes)))
        draw = sample_draw(placement, rng)
        spec = None
        if sp_transforms is not None:
            spec = sp_transforms.specs[int(rng.integers(len(sp_transforms.specs)))]
        scene = scenes[idx]
        placed = apply_patch(scene, patch, _scene_bbox(model, scene),
                             placement, draw=draw)
        processed = placed.image if spec is None \
            else _apply_craft_transform(placed.image, spec)
        loss_sum += model.loss(processed, loss_spec)
        g = model.gradient(processed, loss_spec)
        if spec is not None:
            g = transform_adjoint(g, spec)
        grad_sum += placed.patch_gradient(g)
        draws.append(EotDraw(idx, draw.rotation_deg, draw.brightness,
                             None if spec is None else spec.kind))
    return grad_sum / eot_samples, loss_sum / eot_samples, tuple(draws)


def lk_patch_step(
    patch: Patch,
    scenes: list[Image],
    model: TargetModel,
    target_class: int,
    placement: PlacementSpec,
    epsilon: float,
    rng: np.random.Generator | int,
    eot_samples: int = 8,
    sp_transforms: TransformSet | None = None,
) -> tuple[Patch, float, tuple[EotDraw, ...]]:
    """One signed-gradient update averaged over EOT draws."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mean_grad, mean_loss, draws = _eot_gradient(
        patch, scenes, model, target_class, placement, gen, eot_samples,
        sp_transforms)
    new_data = np.clip(patch.data - epsilon * np.sign(mean_grad), 0.0, 1.0)
    return Patch(Image(new_data)), mean_loss, draws


# ------------------------------------------------------------ feature penalty


def oe_sift_penalty(
    scene_with_patch: Image,
    extractor: ExtractorSpec,
    prototype: PrototypeEntry,
    sift_params: SiftParams = SiftParams(),
    bbox: BBox | None = None,
) -> float:
    """Negative normalized match count against the target prototype, in [-1, 0].

    A failed extraction contributes no penalty (0.0) and is logged.
    """
    n_proto = len(prototype.descriptors)
    if n_proto == 0:
        raise ValueError(f"prototype {prototype.prototype_id} has no descriptors")
    if bbox is None:
        bbox = BBox(0, 0, scene_with_patch.width, scene_with_patch.height)
    probe = ModelOutput(bbox, prototype.class_id, 1.0)
    try:
        crop = extract_object(scene_with_patch, probe, extractor)
    except ExtractionError as e:
        log.warning("penalty extraction failed, contributing 0.0: %s", e)
        return 0.0
    _, qdesc = extract_features(crop, sift_params)
    if len(qdesc) == 0:
        return 0.0
    count = match_descriptors(qdesc, prototype.descriptors,
                              sift_params.match_ratio).count
    return -min(count, n_proto) / n_proto


def _penalty_at(
    patch_data: np.ndarray,
    scene: Image,
    bbox: BBox,
    placement: PlacementSpec,
    extractor: ExtractorSpec,
    prototype: PrototypeEntry,
    sift_params: SiftParams,
) -> float:
    patch = Patch(Image(np.clip(patch_data, 0.0, 1.0)))
    placed = apply_patch(scene, patch, bbox, placement, draw=NEUTRAL_DRAW)
    return oe_sift_penalty(placed.image, extractor, prototype, sift_params,
                           bbox=bbox)


def _zo_penalty_gradient(
    patch: Patch,
    scene: Image,
    bbox: BBox,
    placement: PlacementSpec,
    extractor: ExtractorSpec,
    prototype: PrototypeEntry,
    sift_params: SiftParams,
    rng: np.random.Generator,
    zo_samples: int,
    delta: float = ZO_DELTA,
) -> np.ndarray:
    """Two-sided random-direction estimate of d(penalty)/d(patch)."""
    grad = np.zeros(patch.data.shape)
    for _ in range(zo_samples):
        u = rng.choice((-1.0, 1.0), size=patch.data.shape)
        fp = _penalty_at(patch.data + delta * u, scene, bbox, placement,
                         extractor, prototype, sift_params)
        fm = _penalty_at(patch.data - delta * u, scene, bbox, placement,
                         extractor, prototype, sift_params)
        grad += (fp - fm) / (2.0 * delta) * u
    return grad / zo_samples


# ------------------------------------------------------------------ the craft


def craft_patch(
    config: AttackConfig,
    scenes: list[Image],
    model: TargetModel,
    placement: PlacementSpec = PlacementSpec(),
    init_patch: Patch | None = None,
    patch_side: int = 24,
    prototype: PrototypeEntry | None = None,
    extractor: ExtractorSpec = ExtractorSpec(),
    sift_params: SiftParams = SiftParams(),
) -> CraftResult:
    """Iterate the signed-gradient step, recording a full loss trace.

    The EOT draws and the zeroth-order probe directions come from separate
    seeded streams, so a zero penalty weight reproduces the pure
    scene-processing trace byte for byte.
    """
    if not scenes:
        raise ValueError("scene batch is empty")
    oe_mode = config.adaptive_mode in ("oe_sift", "ensemble")
    if oe_mode and prototype is None:
        raise ValueError(f"{config.adaptive_mode} mode requires a target prototype")

    eot_seq, zo_seq = np.random.SeedSequence(config.seed).spawn(2)
    rng_eot = np.random.default_rng(eot_seq)
    rng_zo = np.random.default_rng(zo_seq)

    patch = init_patch if init_patch is not None else gray_patch(patch_side)
    penalty_bbox = _scene_bbox(model, scenes[0])
    trace: list[TraceRow] = []
    for it in range(config.iterations):
        grad, loss, draws = _eot_gradient(
            patch, scenes, model, config.target_class, placement, rng_eot,
            config.eot_samples, config.sp_transforms)
        penalty = 0.0
        if oe_mode and config.lambda_oe != 0.0:
            penalty = _penalty_at(patch.data, scenes[0], penalty_bbox, placement,
                                  extractor, prototype, sift_params)
            grad = grad + config.lambda_oe * _zo_penalty_gradient(
                patch, scenes[0], penalty_bbox, placement, extractor,
                prototype, sift_params, rng_zo, config.zo_samples)
        total = loss + config.lambda_oe * penalty
        if not math.isfinite(total):
            log.error("loss diverged at iteration %d; aborting with trace", it)
            return CraftResult(patch, tuple(trace), diverged=True,
                               note=f"non-finite loss at iteration {it}")
        trace.append(TraceRow(it, loss, penalty, draws))
        patch = Patch(Image(np.clip(patch.data - config.epsilon * np.sign(grad),
                                    0.0, 1.0)))
    return CraftResult(patch, tuple(trace))


def attack_success(
    benign_output: ModelOutput,
    attacked_output: ModelOutput | None,
    target_class_set: set[int],
    iou_min: float = 0.5,
) -> bool:
    """Detection survives, the box stays put, and the class lands on target."""
    if benign_output is None:
        raise ValueError("benign output is required for the box comparison")
    if attacked_output is None:
        return False
    if iou(benign_output.bbox, attacked_output.bbox) < iou_min:
        return False
    return attacked_output.class_id in target_class_set


# ---------------------------------------------------------------- persistence


def save_patch(patch: Patch, path: str | Path, config: AttackConfig | None = None,
               final_loss: float | None = None) -> Path:
    """Write the raster plus a JSON sidecar describing its crafting run."""
    path = Path(path)
    save_image(patch.image, path)
    sidecar = {
        "side": patch.side,
        "config_hash": None if config is None else config.config_hash(),
        "seed": None if config is None else config.seed,
        "adaptive_mode": None if config is None else config.adaptive_mode,
        "final_loss": final_loss,
    }
    side_path = path.with_suffix(".json")
    side_path.write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_patch(path: str | Path) -> Patch:
    return Patch(load_image(path))
