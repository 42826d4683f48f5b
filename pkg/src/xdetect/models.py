"""Target-model stand-ins: a rule-based detector that a magenta marker can
hijack, and a tiny differentiable classifier for gradient-based crafting.

Both are deterministic. The marker model's transform sensitivity is part of
its contract: box blur at or above `disruption_kernel` wipes out marker
detection while leaving hue/shape classification intact, which is exactly the
asymmetry the scene-processing detector exploits.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BBox, ClassDistribution, Image, LUM_WEIGHTS, ModelOutput, gray_array

MAGENTA_DETECT_THRESHOLD = 0.45
# Box blur of this width (or wider) always destroys marker detection.
MARKER_DISRUPTION_KERNEL = 7


class PredictionError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossSpec:
    """What the attack optimizes: a loss kind and its target class."""

    target_class: int
    kind: str = "cross_entropy"

    def __post_init__(self):
        if self.kind != "cross_entropy":
            raise ValueError(f"unsupported loss kind {self.kind!r}")
        if self.target_class < 0:
            raise ValueError("target_class must be non-negative")


class TargetModel(ABC):
    """Object detector facade: one detection per scene, optional gradients."""

    name: str = "model"
    class_names: tuple[str, ...] = ()
    has_distribution: bool = False
    has_gradient: bool = False

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @abstractmethod
    def predict(self, scene: Image) -> ModelOutput | None:
        """Detection for the scene, or None when nothing is found."""

    def gradient(self, scene: Image, loss: LossSpec) -> np.ndarray:
        raise PredictionError(f"{self.name} does not expose gradients")


def lift_to_distribution(output: ModelOutput, n_classes: int) -> ClassDistribution:
    """Expand a bare (class, confidence) pair into a full distribution.

    The predicted class keeps its confidence; the remainder spreads evenly.
    """
    if output.distribution is not None:
        return output.distribution
    if output.class_id >= n_classes:
        raise ValueError("class_id outside the registry")
    mass = np.zeros(n_classes)
    if n_classes == 1:
        mass[0] = 1.0
    else:
        mass[:] = (1.0 - output.confidence) / (n_classes - 1)
        mass[output.class_id] = output.confidence
    return ClassDistribution(mass)


# ------------------------------------------------------------- marker model


@dataclass(frozen=True)
class ClassRule:
    """Hue band plus an elongation flag; enough to tell the world's classes apart."""

    name: str
    hue_deg: float
    elongated: bool


@dataclass(frozen=True)
class MockMarkerModelConfig:
    rules: tuple[ClassRule, ...]
    hijack_class: int = 3
    marker_threshold: float = MAGENTA_DETECT_THRESHOLD
    disruption_kernel: int = MARKER_DISRUPTION_KERNEL
    foreground_threshold: float = 0.25
    hue_tolerance_deg: float = 28.0
    elongation_split: float = 1.8
    hijack_confidence: float = 0.55
    hijack_true_mass: float = 0.35

    def __post_init__(self):
        if not self.rules:
            raise ValueError("need at least one class rule")
        if not 0 <= self.hijack_class < len(self.rules):
            raise ValueError("hijack_class outside the registry")


def _pixel_hues(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hue in degrees and chroma per pixel (hue meaningless where chroma ~ 0)."""
    r, g, b = data[..., 0], data[..., 1], data[..., 2]
    mx = np.max(data, axis=-1)
    mn = np.min(data, axis=-1)
    c = mx - mn
    safe = np.where(c > 0, c, 1.0)
    hue = np.where(
        mx == r, (g - b) / safe % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    ) * 60.0
    return hue % 360.0, c


def magenta_statistic(data: np.ndarray) -> np.ndarray:
    """Smoothed magenta-excess plane: min(R, B) - G, 3x3 box averaged."""
    m = np.clip(np.minimum(data[:, :, 0], data[:, :, 2]) - data[:, :, 1], 0.0, 1.0)
    return ndimage.uniform_filter(m, size=3, mode="nearest")


class MockMarkerModel(TargetModel):
    """Hue-and-shape classifier that a smooth magenta marker hijacks.

    Classification: foreground = largest connected bright component; class =
    best hue-band vote among rules whose elongation flag matches the mask's
    axis ratio. Hijack: if the smoothed magenta statistic inside the padded
    box reaches the threshold, the model announces `hijack_class` instead
    (box unchanged). Blur at `disruption_kernel` or wider kills the statistic.
    """

    has_distribution = True

    def __init__(self, config: MockMarkerModelConfig):
        self.config = config
        self.name = "mock_marker"
        self.class_names = tuple(r.name for r in config.rules)

    def predict(self, scene: Image) -> ModelOutput | None:
        cfg = self.config
        if scene.channels != 3:
            raise PredictionError("marker model expects RGB scenes")
        data = scene.data
        fg = data.max(axis=2) > cfg.foreground_threshold
        if not fg.any():
            return None
        labels, n = ndimage.label(fg)
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        comp = labels == int(np.argmax(sizes))
        if comp.sum() < 16:
            return None
        ys, xs = np.nonzero(comp)
        bbox = BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

        # Shape: principal axis ratio from the mask's second moments.
        ym, xm = ys.mean(), xs.mean()
        cov = np.cov(np.stack([xs - xm, ys - ym]))
        evals = np.sort(np.linalg.eigvalsh(cov))
        elongation = float(np.sqrt(evals[1] / max(evals[0], 1e-9)))
        is_elongated = elongation >= cfg.elongation_split

        hue, chroma = _pixel_hues(data[comp])
        votes = np.zeros(len(cfg.rules))
        chromatic = chroma > 0.05
        for i, rule in enumerate(cfg.rules):
            delta = np.abs((hue - rule.hue_deg + 180.0) % 360.0 - 180.0)
            votes[i] = np.count_nonzero(chromatic & (delta <= cfg.hue_tolerance_deg))
        shape_ok = np.array([r.elongated == is_elongated for r in cfg.rules])
        if (votes * shape_ok).max() > 0:
            votes = votes * shape_ok
        if votes.max() == 0:
            return None
        true_class = int(np.argmax(votes))
        purity = float(votes[true_class] / max(np.count_nonzero(chromatic), 1))

        pad = 4
        y0, y1 = max(0, bbox.y1 - pad), min(scene.height, bbox.y2 + pad)
        x0, x1 = max(0, bbox.x1 - pad), min(scene.width, bbox.x2 + pad)
        marker_level = float(magenta_statistic(data[y0:y1, x0:x1]).max())

        n_cls = len(cfg.rules)
        if marker_level >= cfg.marker_threshold and n_cls > 1:
            mass = np.full(n_cls, 0.0)
            rest = max(1.0 - cfg.hijack_confidence - cfg.hijack_true_mass, 0.0)
            mass[:] = rest / max(n_cls - 2, 1)
            mass[true_class] = cfg.hijack_true_mass
            mass[cfg.hijack_class] = cfg.hijack_confidence
            if cfg.hijack_class == true_class:
                mass[true_class] = cfg.hijack_confidence + cfg.hijack_true_mass
            dist = ClassDistribution(mass).normalize()
            return ModelOutput(bbox, cfg.hijack_class, cfg.hijack_confidence, dist)

        conf = min(0.9 + 0.08 * purity, 0.98)
        if n_cls == 1:
            dist = ClassDistribution(np.ones(1))
            return ModelOutput(bbox, 0, conf, dist)
        mass = np.full(n_cls, (1.0 - conf) / (n_cls - 1))
        mass[true_class] = conf
        return ModelOutput(bbox, true_class, conf, ClassDistribution(mass))


def default_marker_model(hijack_class: int = 3) -> MockMarkerModel:
    """Model wired to the synthetic produce world."""
    from .synthetic import default_world

    rules = tuple(ClassRule(c.name, c.hue_deg, c.aspect >= 1.8) for c in default_world())
    return MockMarkerModel(MockMarkerModelConfig(rules=rules, hijack_class=hijack_class))


# ------------------------------------------------------------------ toy model


class ToyDifferentiableModel(TargetModel):
    """Pooled-grayscale linear softmax classifier with analytic pixel gradients."""

    has_distribution = True
    has_gradient = True

    def __init__(self, class_names: tuple[str, ...], seed: int = 0,
                 pool: tuple[int, int] = (16, 16)):
        if len(class_names) < 2:
            raise ValueError("toy model needs at least two classes")
        self.name = "toy_differentiable"
        self.class_names = tuple(class_names)
        self.pool = (int(pool[0]), int(pool[1]))
        rng = np.random.default_rng(seed)
        self.weights = rng.normal(0.0, 0.5, size=(len(class_names), pool[0] * pool[1]))
        self.bias = np.zeros(len(class_names))

    def _cell_index(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        pr, pc = self.pool
        rows = np.minimum((np.arange(h) * pr) // h, pr - 1)
        cols = np.minimum((np.arange(w) * pc) // w, pc - 1)
        return rows, cols

    def features(self, scene: Image) -> np.ndarray:
        """Block-averaged luminance, flattened row-major to pool[0]*pool[1]."""
        g = gray_array(scene)
        h, w = g.shape
        rows, cols = self._cell_index(h, w)
        pr, pc = self.pool
        sums = np.zeros((pr, pc))
        counts = np.zeros((pr, pc))
        np.add.at(sums, (rows[:, None].repeat(w, 1), cols[None, :].repeat(h, 0)), g)
        np.add.at(counts, (rows[:, None].repeat(w, 1), cols[None, :].repeat(h, 0)), 1.0)
        return (sums / counts).ravel()

    def _softmax(self, scene: Image) -> np.ndarray:
        z = self.weights @ self.features(scene) + self.bias
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def predict(self, scene: Image) -> ModelOutput | None:
        p = self._softmax(scene)
        cls = int(np.argmax(p))
        bbox = BBox(0, 0, scene.width, scene.height)
        return ModelOutput(bbox, cls, float(p[cls]), ClassDistribution(p))

    def loss(self, scene: Image, loss_spec: LossSpec) -> float:
        """Cross-entropy toward the loss target."""
        if loss_spec.target_class >= self.n_classes:
            raise ValueError("loss target outside the registry")
        p = self._softmax(scene)
        return float(-np.log(max(p[loss_spec.target_class], 1e-300)))

    def gradient(self, scene: Image, loss_spec: LossSpec) -> np.ndarray:
        """d(loss)/d(pixel), shaped like the scene, exact for this model."""
        if loss_spec.target_class >= self.n_classes:
            raise ValueError("loss target outside the registry")
        p = self._softmax(scene)
        dz = p.copy()
        dz[loss_spec.target_class] -= 1.0
        dfeat = (self.weights.T @ dz).reshape(self.pool)

        h, w = scene.height, scene.width
        rows, cols = self._cell_index(h, w)
        counts = np.zeros(self.pool)
        np.add.at(counts, (rows[:, None].repeat(w, 1), cols[None, :].repeat(h, 0)), 1.0)
        dgray = dfeat[rows[:, None], cols[None, :]] / counts[rows[:, None], cols[None, :]]
        if scene.channels == 1:
            return dgray[:, :, None]
        return dgray[:, :, None] * np.asarray(LUM_WEIGHTS)[None, None, :]


# ----------------------------------------------------------------- JSON specs


def model_from_spec(spec: dict | str | Path) -> TargetModel:
    """Build a model from a JSON file or an already-parsed dict."""
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    kind = spec.get("type")
    if kind == "mock_marker":
        rules = tuple(ClassRule(r["name"], float(r["hue_deg"]), bool(r["elongated"]))
                      for r in spec["rules"])
        kwargs = {k: spec[k] for k in (
            "hijack_class", "marker_threshold", "disruption_kernel",
            "foreground_threshold", "hue_tolerance_deg", "elongation_split",
            "hijack_confidence", "hijack_true_mass") if k in spec}
        return MockMarkerModel(MockMarkerModelConfig(rules=rules, **kwargs))
    if kind == "toy_differentiable":
        return ToyDifferentiableModel(
            tuple(spec["classes"]),
            seed=int(spec.get("seed", 0)),
            pool=tuple(spec.get("pool", (16, 16))),
        )
    raise ValueError(f"unknown model type {kind!r}")
