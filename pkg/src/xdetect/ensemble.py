"""Detector ensembles and the alert decision.

An alert is pure disagreement: the detector's class differs from the target
model's class. Four configurations share one entry point: each base detector
alone, a probability-sum vote over both, and a two-tier cascade that runs the
cheap scene-processing stage first and only escalates to object extraction
when that stage dissents.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PilImage, ImageDraw

from .core import ClassDistribution, Image, save_image
from .models import PredictionError, TargetModel
from .oed import OedConfig, OedResult, PrototypeLibrary, PrototypeScore, oed_classify
from .sift import match_descriptors
from .spd import TransformRow, TransformSet, default_transform_set, spd_classify

log = logging.getLogger(__name__)

MODES = ("oed_only", "spd_only", "mv", "two_tier")
OVERLAY_POLICIES = ("never", "on_alert", "always")
OVERLAY_GAP = 12


@dataclass
class Explanation:
    """Evidence from the detectors that actually ran."""

    per_transform_table: list[TransformRow] | None = None
    prototype_votes: list[PrototypeScore] | None = None
    match_overlay: Image | None = None
    notes: list[str] = field(default_factory=list)


@dataclass
class Verdict:
    alert: bool
    target_class: int
    detector_class: int | None
    mode: str
    latency_s: float
    explanation: Explanation


@dataclass(frozen=True)
class DetectorConfig:
    """Everything run_detector needs besides the scene and the model."""

    library: PrototypeLibrary | None = None
    oed: OedConfig = field(default_factory=OedConfig)
    transforms: TransformSet | None = None
    overlay: str = "on_alert"

    def __post_init__(self):
        if self.overlay not in OVERLAY_POLICIES:
            raise ValueError(f"unknown overlay policy {self.overlay!r}")
        if self.transforms is None:
            # Resolve once so the style-degrade warning fires per config,
            # not per scene.
            object.__setattr__(self, "transforms", default_transform_set("digital"))


def decide_alert(detector_class: int | None, target_class: int) -> bool:
    """Alert iff a conclusive detector answer differs from the model's."""
    if detector_class is None:
        return False
    return detector_class != target_class


def mv_ensemble(
    oed_dist: ClassDistribution | None,
    spd_dist: ClassDistribution | None,
) -> tuple[int | None, ClassDistribution | None]:
    """Entrywise sum of both class distributions, argmax of the total.

    An inconclusive side falls back to the other; two inconclusive sides
    stay inconclusive.
    """
    if oed_dist is None and spd_dist is None:
        return None, None
    if oed_dist is None:
        combined = spd_dist.mass.copy()
    elif spd_dist is None:
        combined = oed_dist.mass.copy()
    else:
        if oed_dist.mass.shape != spd_dist.mass.shape:
            raise ValueError("detector distributions cover different class sets")
        combined = oed_dist.mass + spd_dist.mass
    dist = ClassDistribution(combined).normalize()
    return dist.argmax_class(), dist


def run_detector(scene: Image, model: TargetModel, mode: str,
                 config: DetectorConfig) -> Verdict:
    """Full pipeline for one scene: predict, detect, compare, explain."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode != "spd_only" and config.library is None:
        raise ValueError(f"mode {mode!r} requires a prototype library")
    start = time.perf_counter()
    output = model.predict(scene)
    if output is None:
        raise PredictionError(f"target model found no object (mode {mode})")
    target = output.class_id

    explanation = Explanation()
    oed_res: OedResult | None = None
    detector_class: int | None = None

    if mode == "oed_only":
        oed_res = oed_classify(scene, output, config.library, config.oed)
        detector_class = oed_res.class_id
    elif mode == "spd_only":
        spd_res = spd_classify(scene, model, config.transforms)
        explanation.per_transform_table = spd_res.rows
        if spd_res.note:
            explanation.notes.append(spd_res.note)
        detector_class = spd_res.class_id
    elif mode == "mv":
        oed_res = oed_classify(scene, output, config.library, config.oed)
        spd_res = spd_classify(scene, model, config.transforms)
        explanation.per_transform_table = spd_res.rows
        if spd_res.note:
            explanation.notes.append(spd_res.note)
        detector_class, _ = mv_ensemble(oed_res.votes, spd_res.aggregated)
    else:  # two_tier
        spd_res = spd_classify(scene, model, config.transforms)
        explanation.per_transform_table = spd_res.rows
        if spd_res.note:
            explanation.notes.append(spd_res.note)
        if spd_res.inconclusive:
            explanation.notes.append(
                "scene-processing stage inconclusive; deferred to object extraction")
            oed_res = oed_classify(scene, output, config.library, config.oed)
            detector_class = oed_res.class_id
        elif spd_res.class_id == target:
            detector_class = spd_res.class_id  # agreement, second stage skipped
        else:
            oed_res = oed_classify(scene, output, config.library, config.oed)
            detector_class = oed_res.class_id  # second stage has final say

    if oed_res is not None:
        explanation.prototype_votes = oed_res.scores
        if oed_res.note:
            explanation.notes.append(oed_res.note)

    if detector_class is None:
        explanation.notes.append("detector inconclusive; no alert raised")
    alert = decide_alert(detector_class, target)

    if _wants_overlay(config.overlay, alert) and oed_res is not None:
        explanation.match_overlay = render_match_overlay(oed_res, config.library)

    latency = time.perf_counter() - start
    return Verdict(alert, target, detector_class, mode, latency, explanation)


def _wants_overlay(policy: str, alert: bool) -> bool:
    return policy == "always" or (policy == "on_alert" and alert)


# ---------------------------------------------------------------- explanation


def _to_rgb_u8(image: Image) -> np.ndarray:
    data = image.data
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return np.rint(data * 255.0).astype(np.uint8)


def render_match_overlay(result: OedResult,
                         library: PrototypeLibrary) -> Image | None:
    """Query and its best prototype side by side, matches drawn as lines."""
    if result.query_image is None or result.query_descriptors is None:
        return None
    if not result.scores:
        return None
    best = min(result.scores, key=lambda s: (-s.match_count, s.prototype_id))
    entry = next(e for e in library.entries if e.prototype_id == best.prototype_id)

    query = result.query_image
    proto = entry.image
    height = max(query.height, proto.height)
    width = query.width + OVERLAY_GAP + proto.width
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    canvas[:query.height, :query.width] = _to_rgb_u8(query)
    x_off = query.width + OVERLAY_GAP
    canvas[:proto.height, x_off:x_off + proto.width] = _to_rgb_u8(proto)

    pil = PilImage.fromarray(canvas)
    draw = ImageDraw.Draw(pil)
    matches = match_descriptors(result.query_descriptors, entry.descriptors,
                                library.sift_params.match_ratio)
    for qi, pi, _dist in matches.pairs:
        qk = result.query_keypoints[qi]
        pk = entry.keypoints[pi]
        draw.line([(qk.x, qk.y), (pk.x + x_off, pk.y)], fill=(0, 255, 0), width=1)
        draw.ellipse([qk.x - 2, qk.y - 2, qk.x + 2, qk.y + 2],
                     outline=(255, 220, 0))
        draw.ellipse([pk.x + x_off - 2, pk.y - 2, pk.x + x_off + 2, pk.y + 2],
                     outline=(255, 220, 0))
    return Image(np.asarray(pil, dtype=np.float64) / 255.0)


def write_verdict(verdict: Verdict, out_dir: str | Path,
                  stem: str = "verdict") -> Path:
    """Persist the verdict as JSON plus any explanation artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    explanation_paths: list[str] = []

    exp = verdict.explanation
    if exp.match_overlay is not None:
        name = f"{stem}_overlay.png"
        save_image(exp.match_overlay, out / name)
        explanation_paths.append(name)
    if exp.per_transform_table is not None:
        name = f"{stem}_transforms.csv"
        with open(out / name, "w") as f:
            f.write("kind,strength,seed,class_id,confidence\n")
            for row in exp.per_transform_table:
                seed = "" if row.spec.seed is None else row.spec.seed
                cid = "" if row.class_id is None else row.class_id
                conf = "" if row.confidence is None else f"{row.confidence:.6f}"
                f.write(f"{row.spec.kind},{row.spec.strength},{seed},{cid},{conf}\n")
        explanation_paths.append(name)
    if exp.prototype_votes is not None:
        name = f"{stem}_votes.csv"
        with open(out / name, "w") as f:
            f.write("prototype_id,class_id,match_count\n")
            for s in exp.prototype_votes:
                f.write(f"{s.prototype_id},{s.class_id},{s.match_count}\n")
        explanation_paths.append(name)

    payload = {
        "alert": verdict.alert,
        "target_class": verdict.target_class,
        "detector_class": verdict.detector_class,
        "mode": verdict.mode,
        "latency_s": verdict.latency_s,
        "explanation_paths": explanation_paths,
        "notes": exp.notes,
    }
    path = out / f"{stem}.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    return path
