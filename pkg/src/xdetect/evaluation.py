"""Corpus evaluation: manifest loading, detection runs, metrics, reports.

The positive class is "adversarial": an alert on a patched scene is a true
positive. Rates with zero denominators are reported as undefined (None),
never as zero.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PilImage

from .core import Annotation, BBox, Image, load_image, yolo_to_xyxy
from .ensemble import DetectorConfig, Verdict, run_detector
from .models import TargetModel

log = logging.getLogger(__name__)

SCHEMAS = ("superstore", "coco_like")
ATTRIBUTE_ENUMS = {
    "light": ("true", "false"),
    "expensive": ("true", "false"),
    "hand_location": ("top", "side", "bottom"),
    "background": ("office", "products"),
    "visual_angle": ("left", "straight", "right"),
}
METRIC_ORDER = ("da", "tpr", "tnr", "fpr", "fnr", "mean_latency_s")


class ManifestError(ValueError):
    """Aggregated validation failures; the message lists every bad entry."""


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    image_path: Path
    annotation: Annotation
    is_adversarial: bool
    attack_id: str | None


@dataclass(frozen=True)
class SceneManifest:
    schema: str
    class_names: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    root: Path


def _image_size(path: Path) -> tuple[int, int]:
    with PilImage.open(path) as im:
        return im.height, im.width


def _parse_entry(index: int, raw: dict, root: Path, schema: str,
                 class_names: tuple[str, ...]) -> tuple[ManifestEntry | None, list[str]]:
    errors: list[str] = []
    image_rel = raw.get("image")
    if not isinstance(image_rel, str):
        return None, [f"entry {index}: missing image path"]
    image_path = root / image_rel
    if not image_path.is_file():
        return None, [f"entry {index}: image {image_rel!r} not found"]

    label_id = raw.get("label_id")
    if not isinstance(label_id, int) or label_id < 0:
        errors.append(f"entry {index}: bad label_id {label_id!r}")
        label_id = 0
    elif class_names and label_id >= len(class_names):
        errors.append(f"entry {index}: label_id {label_id} outside the class list")
    label_name = raw.get("label_name", "")
    if class_names and isinstance(label_id, int) and label_id < len(class_names) \
            and label_name != class_names[label_id]:
        errors.append(f"entry {index}: label_name {label_name!r} does not match "
                      f"class {label_id}")

    h, w = _image_size(image_path)
    bbox = None
    try:
        if schema == "superstore":
            yolo = raw.get("bbox_yolo")
            if not (isinstance(yolo, list) and len(yolo) == 4):
                raise ValueError(f"bbox_yolo must be 4 numbers, got {yolo!r}")
            bbox = yolo_to_xyxy(tuple(float(v) for v in yolo), w, h)
        else:
            xywh = raw.get("bbox_xywh")
            if not (isinstance(xywh, list) and len(xywh) == 4):
                raise ValueError(f"bbox_xywh must be 4 numbers, got {xywh!r}")
            x, y, bw, bh = (float(v) for v in xywh)
            bbox = BBox(int(round(x)), int(round(y)),
                        int(round(x + bw)), int(round(y + bh)))
    except (ValueError, TypeError) as e:
        errors.append(f"entry {index}: invalid bbox ({e})")

    if "is_adversarial" not in raw or not isinstance(raw["is_adversarial"], bool):
        errors.append(f"entry {index}: is_adversarial flag missing or not boolean")
    attack_id = raw.get("attack_id")
    if attack_id is not None and not isinstance(attack_id, str):
        errors.append(f"entry {index}: attack_id must be a string or null")

    attributes = raw.get("attributes") or {}
    if schema == "superstore":
        if not isinstance(attributes, dict):
            errors.append(f"entry {index}: attributes must be a map")
            attributes = {}
        else:
            for key, allowed in ATTRIBUTE_ENUMS.items():
                value = attributes.get(key)
                if value is None:
                    errors.append(f"entry {index}: attribute {key!r} missing")
                elif value not in allowed:
                    errors.append(
                        f"entry {index}: attribute {key}={value!r} not in {allowed}")

    if errors:
        return None, errors
    annotation = Annotation(label_id, label_name, bbox, dict(attributes))
    return ManifestEntry(index, image_path, annotation,
                         bool(raw["is_adversarial"]), attack_id), []


def load_manifest(path: str | Path, schema: str | None = None) -> SceneManifest:
    """Parse and validate a scene manifest; all entry errors are aggregated."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} does not exist")
    data = json.loads(path.read_text())
    declared = data.get("schema")
    if declared not in SCHEMAS:
        raise ManifestError(f"unknown manifest schema {declared!r}")
    if schema is not None and schema != declared:
        raise ManifestError(f"manifest declares schema {declared!r}, "
                            f"expected {schema!r}")
    class_names = tuple(data.get("classes", ()))
    raw_entries = data.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise ManifestError("manifest has no entries")

    root = path.parent
    entries: list[ManifestEntry] = []
    problems: list[str] = []
    for i, raw in enumerate(raw_entries):
        entry, errs = _parse_entry(i, raw, root, declared, class_names)
        problems.extend(errs)
        if entry is not None:
            entries.append(entry)
    if problems:
        raise ManifestError("manifest validation failed:\n" + "\n".join(problems))
    return SceneManifest(declared, class_names, tuple(entries), root)


# ------------------------------------------------------------------- the runs


@dataclass(frozen=True)
class EvalRecord:
    entry: ManifestEntry
    verdict: Verdict | None
    skip_reason: str | None = None


def run_evaluation(
    manifest: SceneManifest,
    model: TargetModel,
    mode: str,
    config: DetectorConfig,
    seed: int = 0,
    jobs: int = 1,
) -> list[EvalRecord]:
    """One verdict per manifest entry, in manifest order.

    Per-entry failures become skip records instead of aborting the run. The
    pipeline itself is deterministic; `seed` is recorded for configurations
    that add stochastic transforms.
    """
    del seed  # detectors are deterministic; kept for stochastic batteries

    def one(entry: ManifestEntry) -> EvalRecord:
        try:
            scene = load_image(entry.image_path)
            verdict = run_detector(scene, model, mode, config)
            return EvalRecord(entry, verdict)
        except Exception as e:  # noqa: BLE001 - skip-and-continue contract
            log.warning("entry %d skipped: %s", entry.index, e)
            return EvalRecord(entry, None, skip_reason=str(e))

    if jobs <= 1:
        return [one(e) for e in manifest.entries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, manifest.entries))


# -------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    counts: dict
    da: float | None
    tpr: float | None
    tnr: float | None
    fpr: float | None
    fnr: float | None
    mean_latency_s: float | None
    p95_latency_s: float | None
    n_skipped: int = 0
    per_scenario: dict = field(default_factory=dict)


def _rates(tp: int, tn: int, fp: int, fn: int) -> dict:
    def ratio(num: int, den: int) -> float | None:
        return None if den == 0 else num / den

    total = tp + tn + fp + fn
    return {
        "da": ratio(tp + tn, total),
        "tpr": ratio(tp, tp + fn),
        "tnr": ratio(tn, tn + fp),
        "fpr": ratio(fp, tn + fp),
        "fnr": ratio(fn, tp + fn),
    }


def report_from_counts(tp: int, tn: int, fp: int, fn: int,
                       latencies: tuple[float, ...] = (),
                       n_skipped: int = 0,
                       per_scenario: dict | None = None) -> MetricsReport:
    rates = _rates(tp, tn, fp, fn)
    mean = round(float(np.mean(latencies)), 6) if latencies else None
    p95 = round(float(np.percentile(latencies, 95)), 6) if latencies else None
    return MetricsReport(
        counts={"tp": tp, "tn": tn, "fp": fp, "fn": fn},
        mean_latency_s=mean, p95_latency_s=p95, n_skipped=n_skipped,
        per_scenario=per_scenario or {}, **rates)


def compute_metrics(records: list[EvalRecord]) -> MetricsReport:
    """Confusion counts from the records; counts are the source of truth."""
    if not records:
        raise ValueError("no records to score")
    tp = tn = fp = fn = 0
    latencies: list[float] = []
    skipped = 0
    groups: dict[str, list[EvalRecord]] = {}
    for rec in records:
        if rec.verdict is None:
            skipped += 1
            continue
        latencies.append(rec.verdict.latency_s)
        adv = rec.entry.is_adversarial
        alert = rec.verdict.alert
        tp += adv and alert
        fn += adv and not alert
        fp += (not adv) and alert
        tn += (not adv) and not alert
        key = rec.entry.attack_id if adv else "benign"
        groups.setdefault(key or "adversarial", []).append(rec)

    per_scenario = {}
    for key in sorted(groups):
        recs = groups[key]
        s_tp = sum(r.entry.is_adversarial and r.verdict.alert for r in recs)
        s_fn = sum(r.entry.is_adversarial and not r.verdict.alert for r in recs)
        s_fp = sum((not r.entry.is_adversarial) and r.verdict.alert for r in recs)
        s_tn = sum((not r.entry.is_adversarial) and not r.verdict.alert for r in recs)
        per_scenario[key] = {
            "counts": {"tp": s_tp, "tn": s_tn, "fp": s_fp, "fn": s_fn},
            **_rates(s_tp, s_tn, s_fp, s_fn),
        }
    return report_from_counts(tp, tn, fp, fn, tuple(latencies), skipped,
                              per_scenario)


# -------------------------------------------------------------------- reports


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def emit_report(report: MetricsReport, fmt: str, path: str | Path) -> Path:
    """Write the report; identical reports produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        lines = ["metric,value"]
        for name in METRIC_ORDER:
            lines.append(f"{name},{_fmt(getattr(report, name))}")
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "json":
        payload = {
            "counts": report.counts,
            "da": report.da,
            "tpr": report.tpr,
            "tnr": report.tnr,
            "fpr": report.fpr,
            "fnr": report.fnr,
            "mean_latency_s": report.mean_latency_s,
            "p95_latency_s": report.p95_latency_s,
            "n_skipped": report.n_skipped,
            "per_scenario": report.per_scenario,
        }
        path.write_text(json.dumps(payload, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report(path: str | Path) -> MetricsReport:
    """Rebuild a report from its JSON form; rates recompute from counts."""
    data = json.loads(Path(path).read_text())
    counts = data["counts"]
    report = report_from_counts(
        counts["tp"], counts["tn"], counts["fp"], counts["fn"],
        n_skipped=data.get("n_skipped", 0),
        per_scenario=data.get("per_scenario", {}))
    return MetricsReport(
        counts=report.counts, da=report.da, tpr=report.tpr, tnr=report.tnr,
        fpr=report.fpr, fnr=report.fnr,
        mean_latency_s=data.get("mean_latency_s"),
        p95_latency_s=data.get("p95_latency_s"),
        n_skipped=report.n_skipped, per_scenario=report.per_scenario)
