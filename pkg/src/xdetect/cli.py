"""Command-line front door.

Exit codes: 0 success (no alert), 2 adversarial alert, 1 error. A JSON
config file supplies per-section defaults; command-line flags win over the
file. X_DETECT_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .attack import (ADAPTIVE_MODES, SP_CRAFT_KINDS, AttackConfig, PlacementSpec,
                     craft_patch, save_patch)
from .core import load_image
from .ensemble import MODES, DetectorConfig, run_detector, write_verdict
from .evaluation import compute_metrics, emit_report, load_manifest, run_evaluation
from .extraction import ExtractorSpec
from .models import TargetModel, ToyDifferentiableModel, default_marker_model, model_from_spec
from .oed import DEFAULT_PROTOTYPES_PER_CLASS, OedConfig, build_prototype_library, load_library, save_library
from .spd import TransformSet, default_transform_set
from .synthetic import default_world, prototype_images, render_scene

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
PATCH_SIDE_BY_SPACE = {"digital": 120, "physical": 100}
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ALERT = 2


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--jobs", type=int, default=None)
    common.add_argument("--mode", default=None,
                        help=f"detector mode, one of {MODES} or 'all'")
    common.add_argument("--space", choices=("digital", "physical"), default=None)

    parser = argparse.ArgumentParser(
        prog="x-detect",
        description="Explainable adversarial-patch detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-prototypes", parents=[common],
                       help="build a prototype library from class image folders")
    b.add_argument("images_root", type=Path,
                   help="directory with one sub-folder of images per class")
    b.add_argument("--per-class", type=int, default=DEFAULT_PROTOTYPES_PER_CLASS)
    b.add_argument("--classes", default=None,
                   help="comma-separated class list; default: sub-folder names")
    b.add_argument("--force", action="store_true",
                   help="overwrite an existing library")
    b.set_defaults(func=cmd_build_prototypes)

    d = sub.add_parser("detect", parents=[common],
                       help="run the detector on one scene")
    d.add_argument("image", type=Path)
    d.add_argument("--library", type=Path, default=None)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", parents=[common],
                       help="score a manifest of scenes")
    e.add_argument("manifest", type=Path)
    e.add_argument("--library", type=Path, default=None)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("craft-patch", parents=[common],
                       help="craft an adversarial patch against the toy model")
    c.add_argument("--scenes", nargs="*", type=Path, default=None,
                   help="scene images; default: three rendered scenes")
    c.add_argument("--iterations", type=int, default=None)
    c.add_argument("--epsilon", type=float, default=None)
    c.add_argument("--target-class", type=int, default=None)
    c.add_argument("--eot-samples", type=int, default=None)
    c.add_argument("--adaptive-mode", choices=ADAPTIVE_MODES, default=None)
    c.add_argument("--lambda-oe", type=float, default=None)
    c.add_argument("--zo-samples", type=int, default=None)
    c.add_argument("--patch-side", type=int, default=None)
    c.set_defaults(func=cmd_craft_patch)
    return parser


# ---------------------------------------------------------------- config glue


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    return json.loads(path.read_text())


def _section(cfg: dict, name: str) -> dict:
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise ValueError(f"config section {name!r} must be an object")
    return value


def _pick(flag, *fallbacks, default=None):
    """First non-None among the flag, config values, and the default."""
    for value in (flag, *fallbacks):
        if value is not None:
            return value
    return default


def _resolved(args, cfg: dict) -> dict:
    detector = _section(cfg, "detector")
    return {
        "seed": int(_pick(args.seed, cfg.get("seed"), default=0)),
        "out": Path(_pick(args.out, cfg.get("out"), default="xdetect_out")),
        "jobs": int(_pick(args.jobs, cfg.get("jobs"), default=1)),
        "mode": _pick(args.mode, detector.get("mode"), default="two_tier"),
        "space": _pick(args.space, detector.get("space"), default="digital"),
    }


def _detection_model(cfg: dict) -> TargetModel:
    spec = cfg.get("model")
    return default_marker_model() if spec is None else model_from_spec(spec)


def _craft_model(cfg: dict, seed: int) -> TargetModel:
    spec = cfg.get("model")
    if spec is None:
        names = tuple(c.name for c in default_world())
        return ToyDifferentiableModel(names, seed=seed)
    return model_from_spec(spec)


def _detector_config(args, cfg: dict, run: dict, mode: str) -> DetectorConfig:
    detector = _section(cfg, "detector")
    library = None
    lib_path = _pick(getattr(args, "library", None), detector.get("library"))
    if lib_path is not None:
        library = load_library(lib_path)
    elif mode != "spd_only":
        raise ValueError(f"mode {mode!r} needs --library (or detector.library)")
    extractor_cfg = detector.get("extractor", {})
    extractor = ExtractorSpec(**extractor_cfg) if extractor_cfg else ExtractorSpec()
    oed = OedConfig(k=int(detector.get("k", OedConfig().k)), extractor=extractor)
    transforms = default_transform_set(run["space"], noise_seed=run["seed"])
    return DetectorConfig(library=library, oed=oed, transforms=transforms)


# ------------------------------------------------------------------- commands


def cmd_build_prototypes(args) -> int:
    cfg = _load_config(args)
    run = _resolved(args, cfg)
    root = Path(args.images_root)
    if not root.is_dir():
        raise FileNotFoundError(f"images root {root} does not exist")
    if args.classes:
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
    else:
        names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise ValueError(f"no class directories under {root}")

    images_by_class = {}
    for name in names:
        class_dir = root / name
        if not class_dir.is_dir():
            raise FileNotFoundError(f"class directory {name!r} missing under {root}")
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        images_by_class[name] = [load_image(p) for p in files]

    library = build_prototype_library(images_by_class, n_per_class=args.per_class)
    out = run["out"] / "library"
    save_library(library, out, force=args.force)
    total_desc = sum(len(e.descriptors) for e in library.entries)
    print(f"built library: {library.n_classes} classes, "
          f"{len(library.entries)} prototypes, {total_desc} descriptors -> {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    run = _resolved(args, cfg)
    mode = run["mode"]
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    model = _detection_model(cfg)
    detector_cfg = _detector_config(args, cfg, run, mode)
    scene = load_image(args.image)
    verdict = run_detector(scene, model, mode, detector_cfg)
    path = write_verdict(verdict, run["out"], stem=Path(args.image).stem)
    print(path.read_text(), end="")
    return EXIT_ALERT if verdict.alert else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    run = _resolved(args, cfg)
    modes = list(MODES) if run["mode"] == "all" else [run["mode"]]
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    model = _detection_model(cfg)
    manifest = load_manifest(args.manifest)

    print("mode,da,tpr,tnr,fpr,fnr,mean_latency_s")
    for mode in modes:
        detector_cfg = _detector_config(args, cfg, run, mode)
        records = run_evaluation(manifest, model, mode, detector_cfg,
                                 seed=run["seed"], jobs=run["jobs"])
        report = compute_metrics(records)
        emit_report(report, "csv", run["out"] / f"report_{mode}.csv")
        emit_report(report, "json", run["out"] / f"report_{mode}.json")

        def cell(v):
            return "undefined" if v is None else f"{v:.6f}"

        print(",".join([mode, cell(report.da), cell(report.tpr),
                        cell(report.tnr), cell(report.fpr), cell(report.fnr),
                        cell(report.mean_latency_s)]))
    return EXIT_OK


def _craft_attack_config(args, cfg: dict, run: dict) -> AttackConfig:
    attack = _section(cfg, "attack")
    mode = _pick(args.adaptive_mode, attack.get("adaptive_mode"), default="none")
    sp_transforms = None
    if mode in ("scene_processing", "ensemble"):
        battery = default_transform_set(run["space"], noise_seed=run["seed"])
        sp_transforms = TransformSet(tuple(
            s for s in battery.specs if s.kind in SP_CRAFT_KINDS))
    return AttackConfig(
        target_class=int(_pick(args.target_class, attack.get("target_class"),
                               default=3)),
        epsilon=float(_pick(args.epsilon, attack.get("epsilon"), default=0.02)),
        iterations=int(_pick(args.iterations, attack.get("iterations"),
                             default=50)),
        seed=run["seed"],
        eot_samples=int(_pick(args.eot_samples, attack.get("eot_samples"),
                              default=8)),
        adaptive_mode=mode,
        sp_transforms=sp_transforms,
        lambda_oe=float(_pick(args.lambda_oe, attack.get("lambda_oe"),
                              default=0.0)),
        zo_samples=int(_pick(args.zo_samples, attack.get("zo_samples"),
                             default=0)),
    )


def cmd_craft_patch(args) -> int:
    cfg = _load_config(args)
    run = _resolved(args, cfg)
    attack_cfg = _craft_attack_config(args, cfg, run)
    model = _craft_model(cfg, run["seed"])

    if args.scenes:
        scenes = [load_image(p) for p in args.scenes]
    else:
        world = default_world()
        scenes = [render_scene(world, i % len(world), seed=run["seed"] + i).image
                  for i in range(3)]

    prototype = None
    if attack_cfg.adaptive_mode in ("oe_sift", "ensemble"):
        world = default_world()
        if not 0 <= attack_cfg.target_class < len(world):
            raise ValueError(
                f"no default prototype for class {attack_cfg.target_class}; "
                "oe crafting against custom worlds needs the Python API")
        name = world[attack_cfg.target_class].name
        imgs = prototype_images(world, attack_cfg.target_class, 1)
        prototype = build_prototype_library({name: imgs}, n_per_class=1).entries[0]

    side = int(_pick(args.patch_side, _section(cfg, "attack").get("patch_side"),
                     default=PATCH_SIDE_BY_SPACE[run["space"]]))
    result = craft_patch(attack_cfg, scenes, model,
                         PlacementSpec(scale=0.5), patch_side=side,
                         prototype=prototype)

    out = run["out"]
    out.mkdir(parents=True, exist_ok=True)
    save_patch(result.patch, out / "patch.png", attack_cfg,
               final_loss=result.final_loss)
    with open(out / "trace.csv", "w") as f:
        f.write("iteration,loss,penalty\n")
        for row in result.trace:
            f.write(f"{row.iteration},{row.loss:.10f},{row.penalty:.10f}\n")
    draws = [[{"scene_index": d.scene_index, "rotation_deg": d.rotation_deg,
               "brightness": d.brightness, "transform": d.transform}
              for d in row.draws] for row in result.trace]
    (out / "draws.json").write_text(json.dumps(draws, indent=1) + "\n")

    if result.diverged:
        print(f"error: {result.note}; trace retained in {out}", file=sys.stderr)
        return EXIT_ERROR
    first = result.trace[0].loss if result.trace else float("nan")
    print(f"crafted patch (side {result.patch.side}) in "
          f"{len(result.trace)} iterations; loss {first:.6f} -> "
          f"{result.final_loss:.6f} -> {out / 'patch.png'}")
    return EXIT_OK


def main(argv=None) -> int:
    level = os.environ.get("X_DETECT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - single exit funnel
        log.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
