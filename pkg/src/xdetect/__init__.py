"""Explainable detection of adversarial patch attacks on object detectors.

Two base detectors with human-readable evidence: one re-identifies the
extracted object against class prototypes by feature-match counts, the other
re-queries the target model under a battery of image transforms. Either can
run alone, or combined (distribution sum or two-tier escalation). An alert is
raised when the detector disagrees with the target model's class.
"""

from .core import (
    BBox,
    ClassDistribution,
    Image,
    ModelOutput,
    iou,
    load_image,
    save_image,
    xyxy_to_yolo,
    yolo_to_xyxy,
)
from .sift import Keypoint, MatchSet, SiftParams, extract_features, match_count, match_descriptors
from .extraction import ExtractionError, ExtractorSpec, extract_object
from .models import (
    MockMarkerModel,
    PredictionError,
    TargetModel,
    ToyDifferentiableModel,
    default_marker_model,
    model_from_spec,
)
from .oed import (
    OedConfig,
    OedResult,
    PrototypeLibrary,
    build_prototype_library,
    load_library,
    oed_classify,
    prototype_knn_classify,
    save_library,
    score_prototypes,
)
from .spd import (
    SpdResult,
    TransformSet,
    TransformSpec,
    apply_transform,
    default_transform_set,
    register_style_backend,
    spd_classify,
)
from .ensemble import (
    MODES,
    DetectorConfig,
    Verdict,
    decide_alert,
    mv_ensemble,
    run_detector,
    write_verdict,
)
from .attack import (
    AttackConfig,
    CraftResult,
    Patch,
    PlacementSpec,
    apply_patch,
    attack_success,
    craft_patch,
    lk_patch_step,
    load_patch,
    oe_sift_penalty,
    save_patch,
)
from .evaluation import (
    ManifestError,
    MetricsReport,
    SceneManifest,
    compute_metrics,
    emit_report,
    load_manifest,
    load_report,
    run_evaluation,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ClassDistribution",
    "Image",
    "ModelOutput",
    "iou",
    "load_image",
    "save_image",
    "xyxy_to_yolo",
    "yolo_to_xyxy",
    "Keypoint",
    "MatchSet",
    "SiftParams",
    "extract_features",
    "match_count",
    "match_descriptors",
    "ExtractionError",
    "ExtractorSpec",
    "extract_object",
    "MockMarkerModel",
    "PredictionError",
    "TargetModel",
    "ToyDifferentiableModel",
    "default_marker_model",
    "model_from_spec",
    "OedConfig",
    "OedResult",
    "PrototypeLibrary",
    "build_prototype_library",
    "load_library",
    "oed_classify",
    "prototype_knn_classify",
    "save_library",
    "score_prototypes",
    "SpdResult",
    "TransformSet",
    "TransformSpec",
    "apply_transform",
    "default_transform_set",
    "register_style_backend",
    "spd_classify",
    "MODES",
    "DetectorConfig",
    "Verdict",
    "decide_alert",
    "mv_ensemble",
    "run_detector",
    "write_verdict",
    "AttackConfig",
    "CraftResult",
    "Patch",
    "PlacementSpec",
    "apply_patch",
    "attack_success",
    "craft_patch",
    "lk_patch_step",
    "load_patch",
    "oe_sift_penalty",
    "save_patch",
    "ManifestError",
    "MetricsReport",
    "SceneManifest",
    "compute_metrics",
    "emit_report",
    "load_manifest",
    "load_report",
    "run_evaluation",
]
