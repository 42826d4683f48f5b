import numpy as np
import pytest

from xdetect.core import BBox, ClassDistribution, Image, ModelOutput
from xdetect.models import TargetModel, default_marker_model
from xdetect.spd import (
    TransformSet,
    TransformSpec,
    apply_transform,
    default_transform_set,
    register_style_backend,
    spd_classify,
    style_backends,
    unregister_style_backend,
)
from xdetect.synthetic import default_world, render_scene


def const_image(value, shape=(24, 32, 3)):
    return Image(np.full(shape, value))


def random_image(seed, shape=(24, 32, 3)):
    rng = np.random.default_rng(seed)
    return Image(rng.uniform(0.0, 1.0, shape))


class SequenceModel(TargetModel):
    """Replays a fixed list of outputs, one per predict call."""

    def __init__(self, outputs, n_classes=4):
        self.class_names = tuple(f"c{i}" for i in range(n_classes))
        self._outputs = list(outputs)
        self._calls = 0

    def predict(self, scene):
        out = self._outputs[self._calls]
        self._calls += 1
        return out


def full_output(mass):
    mass = np.asarray(mass, dtype=float)
    cls = int(np.argmax(mass))
    return ModelOutput(BBox(0, 0, 4, 4), cls, float(mass[cls]),
                       ClassDistribution(mass))


class TestTransformSpec:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown transform kind"):
            TransformSpec("solarize", 1.0)

    def test_noise_requires_seed(self):
        with pytest.raises(ValueError, match="seed"):
            TransformSpec("noise", 0.2)

    def test_blur_width_must_be_at_least_one(self):
        with pytest.raises(ValueError):
            TransformSpec("blur", 0.4)

    def test_darken_strength_range(self):
        with pytest.raises(ValueError):
            TransformSpec("darken", 1.0)

    def test_duplicate_specs_rejected(self):
        spec = TransformSpec("darken", 0.1)
        with pytest.raises(ValueError, match="duplicate"):
            TransformSet((spec, spec))

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            TransformSet(())


class TestApplyTransform:
    def test_identity_returns_equal_pixels(self):
        img = random_image(0)
        out = apply_transform(img, TransformSpec("identity"))
        assert np.array_equal(out.data, img.data)

    def test_darken_scales_exactly(self):
        out = apply_transform(const_image(0.5), TransformSpec("darken", 0.1))
        assert np.allclose(out.data, 0.45)

    def test_blur_preserves_constant_image(self):
        out = apply_transform(const_image(0.3), TransformSpec("blur", 6))
        assert np.allclose(out.data, 0.3)

    def test_blur_even_width_rounds_up_to_odd(self):
        img = random_image(1)
        six = apply_transform(img, TransformSpec("blur", 6))
        seven = apply_transform(img, TransformSpec("blur", 7))
        assert np.array_equal(six.data, seven.data)

    def test_blur_flattens_a_spike(self):
        data = np.zeros((21, 21, 1))
        data[10, 10, 0] = 1.0
        out = apply_transform(Image(data), TransformSpec("blur", 5))
        assert out.data.max() == pytest.approx(1.0 / 25.0)

    def test_sharpen_keeps_constant_image(self):
        out = apply_transform(const_image(0.6), TransformSpec("sharpen", 1.0))
        assert np.allclose(out.data, 0.6)

    def test_sharpen_raises_edge_contrast(self):
        data = np.zeros((16, 16, 1))
        data[:, 8:] = 0.2
        data[:, :8] = 0.8
        img = Image(data)
        out = apply_transform(img, TransformSpec("sharpen", 1.0))
        assert out.data.std() > img.data.std()

    def test_noise_is_reproducible(self):
        img = random_image(2)
        spec = TransformSpec("noise", 0.35, seed=7)
        a = apply_transform(img, spec)
        b = apply_transform(img, spec)
        assert np.array_equal(a.data, b.data)

    def test_noise_seed_changes_output(self):
        img = random_image(3)
        a = apply_transform(img, TransformSpec("noise", 0.35, seed=1))
        b = apply_transform(img, TransformSpec("noise", 0.35, seed=2))
        assert not np.array_equal(a.data, b.data)

    def test_noise_stays_within_band(self):
        img = const_image(0.5)
        out = apply_transform(img, TransformSpec("noise", 0.2, seed=0))
        assert out.data.min() >= 0.3 - 1e-12
        assert out.data.max() <= 0.7 + 1e-12

    @pytest.mark.parametrize("spec", [
        TransformSpec("blur", 6),
        TransformSpec("sharpen", 1.0),
        TransformSpec("noise", 0.35, seed=5),
        TransformSpec("darken", 0.1),
    ])
    def test_output_stays_in_unit_range(self, spec):
        out = apply_transform(random_image(4), spec)
        assert out.data.min() >= 0.0
        assert out.data.max() <= 1.0


class TestStyleHook:
    def test_unregistered_hook_raises(self):
        assert not style_backends()
        with pytest.raises(RuntimeError, match="no registered backend"):
            apply_transform(random_image(5), TransformSpec("style_hook"))

    def test_registered_backend_is_applied(self):
        register_style_backend("invert", lambda img, style: Image(1.0 - img.data))
        try:
            img = const_image(0.2)
            out = apply_transform(img, TransformSpec("style_hook"))
            assert np.allclose(out.data, 0.8)
        finally:
            unregister_style_backend("invert")

    def test_duplicate_registration_rejected(self):
        register_style_backend("noop", lambda img, style: img)
        try:
            with pytest.raises(ValueError, match="already registered"):
                register_style_backend("noop", lambda img, style: img)
        finally:
            unregister_style_backend("noop")


class TestDefaultTransformSet:
    def test_digital_battery_without_backend(self, caplog):
        with caplog.at_level("WARNING", logger="xdetect.spd"):
            ts = default_transform_set("digital")
        kinds = [s.kind for s in ts.specs]
        assert kinds == ["blur", "sharpen", "darken", "identity"]
        assert ts.specs[0].strength == 6.0
        assert "degrades to identity" in caplog.text

    def test_physical_battery_has_seeded_noise(self):
        ts = default_transform_set("physical", noise_seed=42)
        kinds = [s.kind for s in ts.specs]
        assert kinds == ["blur", "sharpen", "noise", "darken", "identity"]
        noise = ts.specs[2]
        assert noise.strength == 0.35
        assert noise.seed == 42
        assert ts.specs[0].strength == 12.0

    def test_registered_backend_restores_style_slot(self):
        register_style_backend("noop", lambda img, style: img)
        try:
            ts = default_transform_set("digital")
            assert ts.specs[-1].kind == "style_hook"
        finally:
            unregister_style_backend("noop")

    def test_unknown_space_rejected(self):
        with pytest.raises(ValueError, match="unknown space"):
            default_transform_set("quantum")


class TestSpdClassify:
    BATTERY = TransformSet((
        TransformSpec("identity"),
        TransformSpec("darken", 0.1),
        TransformSpec("sharpen", 1.0),
    ))

    def test_aggregate_matches_hand_sum(self):
        dists = [
            [0.70, 0.10, 0.10, 0.10],
            [0.10, 0.60, 0.20, 0.10],
            [0.05, 0.50, 0.40, 0.05],
        ]
        model = SequenceModel([full_output(d) for d in dists])
        result = spd_classify(random_image(6), model, self.BATTERY)
        expected = np.sum(dists, axis=0)
        expected = expected / expected.sum()
        assert result.class_id == 1
        assert np.allclose(result.aggregated.mass, expected)
        assert [r.class_id for r in result.rows] == [0, 1, 1]

    def test_missed_detection_contributes_zero(self):
        dists = [
            [0.70, 0.10, 0.10, 0.10],
            [0.10, 0.10, 0.10, 0.70],
        ]
        model = SequenceModel([full_output(dists[0]), None, full_output(dists[1])])
        result = spd_classify(random_image(7), model, self.BATTERY)
        expected = np.sum(dists, axis=0)
        expected = expected / expected.sum()
        assert np.allclose(result.aggregated.mass, expected)
        row = result.rows[1]
        assert row.class_id is None and row.confidence is None

    def test_all_missed_is_inconclusive(self):
        model = SequenceModel([None, None, None])
        result = spd_classify(random_image(8), model, self.BATTERY)
        assert result.inconclusive
        assert result.class_id is None
        assert result.aggregated is None
        assert "no transform produced a detection" in result.note

    def test_bare_outputs_are_lifted(self):
        bare = ModelOutput(BBox(0, 0, 4, 4), 2, 0.7)
        model = SequenceModel([bare, bare, bare])
        result = spd_classify(random_image(9), model, self.BATTERY)
        assert result.class_id == 2
        assert result.aggregated.mass[2] == pytest.approx(0.7)
        assert result.aggregated.mass[0] == pytest.approx(0.1)

    def test_aggregate_invariant_to_battery_order(self):
        dists = [
            [0.70, 0.10, 0.10, 0.10],
            [0.10, 0.60, 0.20, 0.10],
            [0.05, 0.50, 0.40, 0.05],
        ]
        fwd = spd_classify(
            random_image(10),
            SequenceModel([full_output(d) for d in dists]), self.BATTERY)
        rev_battery = TransformSet(tuple(reversed(self.BATTERY.specs)))
        rev = spd_classify(
            random_image(10),
            SequenceModel([full_output(d) for d in reversed(dists)]), rev_battery)
        assert fwd.class_id == rev.class_id
        assert np.allclose(fwd.aggregated.mass, rev.aggregated.mass)


class TestMarkerFlip:
    def test_blur_breaks_the_marker_and_flips_the_aggregate(self):
        world = default_world()
        model = default_marker_model()
        scene = render_scene(world, 1, seed=77, marker=True)
        raw = model.predict(scene.image)
        assert raw.class_id == model.config.hijack_class

        result = spd_classify(scene.image, model, default_transform_set("digital"))
        by_kind = {row.spec.kind: row.class_id for row in result.rows}
        assert by_kind["blur"] == 1
        assert by_kind["sharpen"] == model.config.hijack_class
        assert by_kind["darken"] == model.config.hijack_class
        assert by_kind["identity"] == model.config.hijack_class
        assert result.class_id == 1
        assert result.class_id != raw.class_id

    def test_benign_scene_keeps_its_class(self):
        world = default_world()
        model = default_marker_model()
        scene = render_scene(world, 2, seed=31)
        raw = model.predict(scene.image)
        assert raw.class_id == 2

        result = spd_classify(scene.image, model, default_transform_set("digital"))
        assert result.class_id == raw.class_id
        assert not result.inconclusive
