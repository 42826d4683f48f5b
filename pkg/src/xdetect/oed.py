"""Object-extraction detector: prototype library plus match-count KNN.

A query object is scored against every stored prototype by the number of
accepted feature matches; the k highest-scoring prototypes vote on the class.
With k=1 this collapses to "class of the single best-matching prototype",
the maximum-match rule the detector is built around.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Image, ClassDistribution, ModelOutput, load_image, save_image
from .extraction import ExtractionError, ExtractorSpec, extract_object
from .sift import Keypoint, SiftParams, extract_features, match_descriptors

log = logging.getLogger(__name__)

DEFAULT_K = 7
DEFAULT_PROTOTYPES_PER_CLASS = 10
MIN_QUERY_SIDE = 16


@dataclass(frozen=True)
class PrototypeEntry:
    """Extracted prototype raster with its precomputed features."""

    prototype_id: str
    class_id: int
    image: Image
    keypoints: tuple[Keypoint, ...]
    descriptors: np.ndarray


@dataclass(frozen=True)
class PrototypeLibrary:
    class_names: tuple[str, ...]
    entries: tuple[PrototypeEntry, ...]
    n_per_class: int
    sift_params: SiftParams

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def entries_of(self, class_id: int) -> list[PrototypeEntry]:
        return [e for e in self.entries if e.class_id == class_id]


@dataclass(frozen=True)
class PrototypeScore:
    prototype_id: str
    class_id: int
    match_count: int


@dataclass(frozen=True)
class OedConfig:
    """Detector knobs; feature parameters always come from the library."""

    k: int = DEFAULT_K
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)


@dataclass
class OedResult:
    class_id: int | None
    votes: ClassDistribution | None
    scores: list[PrototypeScore]
    inconclusive: bool = False
    note: str = ""
    query_image: Image | None = None
    query_keypoints: tuple[Keypoint, ...] = ()
    query_descriptors: np.ndarray | None = None


def build_prototype_library(
    images_by_class: dict[str, list[Image]],
    n_per_class: int = DEFAULT_PROTOTYPES_PER_CLASS,
    extractor: ExtractorSpec = ExtractorSpec(),
    sift_params: SiftParams = SiftParams(),
) -> PrototypeLibrary:
    """Extract and featurize n prototypes per class.

    Classes keep their mapping-iteration order. A class with too few images,
    or a prototype whose extraction fails, aborts the build with a named error.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    class_names = tuple(images_by_class.keys())
    entries: list[PrototypeEntry] = []
    for class_id, name in enumerate(class_names):
        imgs = images_by_class[name]
        if len(imgs) < n_per_class:
            raise ValueError(
                f"class {name!r} has {len(imgs)} images, need {n_per_class}")
        for i, img in enumerate(imgs[:n_per_class]):
            pid = f"{name}_{i:03d}"
            full = ModelOutput(
                bbox=_full_bbox(img), class_id=class_id, confidence=1.0)
            try:
                crop = extract_object(img, full, extractor)
            except ExtractionError as e:
                raise ExtractionError(f"prototype {pid}: {e}") from e
            kps, desc = extract_features(crop, sift_params)
            if len(desc) == 0:
                raise ValueError(f"prototype {pid} produced no descriptors")
            entries.append(PrototypeEntry(pid, class_id, crop, tuple(kps), desc))
    return PrototypeLibrary(class_names, tuple(entries), n_per_class, sift_params)


def _full_bbox(img: Image):
    from .core import BBox

    return BBox(0, 0, img.width, img.height)


def score_prototypes(query: Image, library: PrototypeLibrary) -> list[PrototypeScore]:
    """Match counts of the query against every entry, in library order."""
    _, qdesc = extract_features(query, library.sift_params)
    return _score_descriptors(qdesc, library)


def _score_descriptors(qdesc: np.ndarray, library: PrototypeLibrary) -> list[PrototypeScore]:
    ratio = library.sift_params.match_ratio
    return [
        PrototypeScore(e.prototype_id, e.class_id,
                       match_descriptors(qdesc, e.descriptors, ratio).count)
        for e in library.entries
    ]


def prototype_knn_classify(
    scores: list[PrototypeScore], k: int, n_classes: int,
) -> tuple[int | None, ClassDistribution | None]:
    """Majority vote of the k best-matching prototypes.

    Ordering is (match count desc, prototype id asc). Vote ties break by the
    tied classes' summed match counts inside the top k, then by lowest class
    id. All-zero scores carry no evidence and return (None, None).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not scores:
        raise ValueError("cannot classify with an empty score list")
    if k > len(scores):
        log.warning("k=%d exceeds library size %d; clamping", k, len(scores))
        k = len(scores)
    if all(s.match_count == 0 for s in scores):
        return None, None
    top = sorted(scores, key=lambda s: (-s.match_count, s.prototype_id))[:k]
    votes = np.zeros(n_classes)
    count_sum = np.zeros(n_classes)
    for s in top:
        votes[s.class_id] += 1.0
        count_sum[s.class_id] += s.match_count
    best_vote = votes.max()
    tied = np.flatnonzero(votes == best_vote)
    if len(tied) > 1:
        best_sum = count_sum[tied].max()
        tied = tied[count_sum[tied] == best_sum]
    winner = int(tied.min())
    return winner, ClassDistribution(votes / k)


def oed_classify(
    scene: Image,
    model_output: ModelOutput,
    library: PrototypeLibrary,
    config: OedConfig = OedConfig(),
) -> OedResult:
    """Extract the detected object and classify it against the library."""
    query = extract_object(scene, model_output, config.extractor)
    if min(query.height, query.width) < MIN_QUERY_SIDE:
        return OedResult(None, None, [], inconclusive=True,
                         note="query crop too small for features", query_image=query)
    kps, qdesc = extract_features(query, library.sift_params)
    scores = _score_descriptors(qdesc, library)
    if len(qdesc) == 0:
        return OedResult(None, None, scores, inconclusive=True,
                         note="query produced no descriptors", query_image=query)
    class_id, votes = prototype_knn_classify(scores, config.k, library.n_classes)
    if class_id is None:
        return OedResult(None, None, scores, inconclusive=True,
                         note="no prototype matches", query_image=query,
                         query_keypoints=tuple(kps), query_descriptors=qdesc)
    return OedResult(class_id, votes, scores, query_image=query,
                     query_keypoints=tuple(kps), query_descriptors=qdesc)


# ---------------------------------------------------------------- persistence


def save_library(library: PrototypeLibrary, out_dir: str | Path,
                 force: bool = False) -> Path:
    """Write rasters plus an index; descriptors are stored bit-exact."""
    out_dir = Path(out_dir)
    index_path = out_dir / "index.json"
    if index_path.exists() and not force:
        raise FileExistsError(f"library already exists at {out_dir}")
    entries = []
    for e in library.entries:
        cls = library.class_names[e.class_id]
        rel = f"{cls}/{e.prototype_id}.png"
        save_image(e.image, out_dir / rel)
        entries.append({
            "prototype_id": e.prototype_id,
            "class_id": e.class_id,
            "image": rel,
            "keypoints": [[k.x, k.y, k.sigma, k.orientation, k.response]
                          for k in e.keypoints],
            "descriptors": {
                "dtype": str(e.descriptors.dtype),
                "shape": list(e.descriptors.shape),
                "data_b64": base64.b64encode(
                    np.ascontiguousarray(e.descriptors).tobytes()).decode("ascii"),
            },
        })
    p = library.sift_params
    index = {
        "class_names": list(library.class_names),
        "n_per_class": library.n_per_class,
        "sift_params": {
            "intervals": p.intervals,
            "base_sigma": p.base_sigma,
            "n_octaves": p.n_octaves,
            "contrast_thresh": p.contrast_thresh,
            "edge_ratio": p.edge_ratio,
            "match_ratio": p.match_ratio,
        },
        "entries": entries,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path.write_text(json.dumps(index))
    return index_path


def load_library(lib_dir: str | Path) -> PrototypeLibrary:
    lib_dir = Path(lib_dir)
    index_path = lib_dir / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no library index at {index_path}")
    index = json.loads(index_path.read_text())
    params = SiftParams(**index["sift_params"])
    entries = []
    for rec in index["entries"]:
        img = load_image(lib_dir / rec["image"])
        kps = tuple(Keypoint(*vals) for vals in rec["keypoints"])
        d = rec["descriptors"]
        desc = np.frombuffer(base64.b64decode(d["data_b64"]),
                             dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()
        entries.append(PrototypeEntry(rec["prototype_id"], rec["class_id"], img, kps, desc))
    return PrototypeLibrary(tuple(index["class_names"]), tuple(entries),
                            int(index["n_per_class"]), params)
