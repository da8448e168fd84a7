import json

import numpy as np
import pytest

from projforge import diffengine as de
from projforge.colormap import ColorModel, additive_law_model, predict_color
from projforge.compositor import (
    ProjectionOperands,
    SceneSpec,
    SceneView,
    TransformParams,
    compose_scene,
    load_scene_bundle,
    object_to_background_warp,
    prepare_projection,
    project_patch,
    project_patch_np,
    project_patch_var,
    render_frame_np,
    render_frame_var,
    save_scene_bundle,
)
from projforge.errors import InputError
from projforge.fixtures import checkerboard_controls, draw_car, make_background
from projforge.geom_tps import TpsModel, apply_tps, fit_tps, warp_mask
from projforge.imagecore import ImageBuffer, Point2, sample_bilinear


def identity_tps() -> TpsModel:
    controls = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
    fwd = TpsModel(
        affine=np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        weights=np.zeros((2, 4)), controls=controls, regularization=0.0,
    )
    return TpsModel(
        affine=fwd.affine, weights=fwd.weights, controls=controls,
        regularization=0.0, reverse=fwd,
    )


@pytest.fixture(scope="module")
def fixture_ops():
    tps = fit_tps(checkerboard_controls())
    shape = ImageBuffer.full(40, 40, 1.0)
    color = ColorModel.initialize(seed=4)
    return ProjectionOperands(tps=tps, color=color, patch_shape=shape)


@pytest.fixture(scope="module")
def car():
    img, mask = draw_car()
    return img, mask


class TestProjectPatch:
    def test_zero_shape_returns_x_bitwise(self, car):
        img, _ = car
        ops = ProjectionOperands(
            tps=identity_tps(),
            color=additive_law_model(),
            patch_shape=ImageBuffer.full(40, 40, 0.0),
        )
        delta = ImageBuffer.full(40, 40, 0.3)
        out, _ = project_patch(ops, img, delta)
        assert np.array_equal(out.data, img.data)

    def test_no_light_projection_keeps_x_under_identity_warp(self):
        rng = np.random.default_rng(2)
        x = ImageBuffer(rng.uniform(0.1, 0.9, (12, 12, 3)))
        ops = ProjectionOperands(
            tps=identity_tps(),
            color=additive_law_model(),  # O = clamp(S + 0.5 P); P=0 keeps S
            patch_shape=ImageBuffer.full(12, 12, 1.0),
        )
        out, _ = project_patch(ops, x, ImageBuffer.full(12, 12, 0.0))
        assert np.abs(out.data - x.data).max() <= 1e-6

    def test_matches_straight_line_oracle(self, fixture_ops, car):
        img, _ = car
        rng = np.random.default_rng(3)
        delta = ImageBuffer(rng.uniform(0, 1, (40, 40, 3)))
        out = project_patch_np(fixture_ops, img.data, delta.data)

        # straight-line re-implementation: per pixel, pull-warp the mask and
        # the patch through the reverse model, gate, color-map, then blend
        tps = fixture_ops.tps
        color = fixture_ops.color
        h, w = img.height, img.width
        want = np.zeros((h, w, 3))
        for y in range(h):
            for x in range(w):
                p = apply_tps(tps.reverse, Point2(float(x), float(y)))
                m = np.clip(sample_bilinear(fixture_ops.patch_shape, p), 0, 1)
                dg = np.clip(sample_bilinear(delta, p), 0, 1)
                base = (1.0 - m) * img.data[y, x]
                if m[0] > 0.0:
                    pred = color.forward((m * img.data[y, x])[None], dg[None])[0]
                    want[y, x] = np.clip(base + pred, 0, 1)
                else:
                    want[y, x] = base
        assert np.abs(out - want).max() <= 1e-10

    def test_var_path_matches_np_path_bitwise(self, fixture_ops, car):
        img, _ = car
        rng = np.random.default_rng(4)
        delta = rng.uniform(0, 1, (40, 40, 3))
        out_np = project_patch_np(fixture_ops, img.data, delta)
        tape = de.Tape()
        out_var = project_patch_var(tape, fixture_ops, img.data, tape.input(delta))
        assert np.array_equal(out_np, out_var.value)

    def test_locality_outside_mask(self, fixture_ops, car):
        img, _ = car
        rng = np.random.default_rng(5)
        delta = rng.uniform(0, 1, (40, 40, 3))
        out = project_patch_np(fixture_ops, img.data, delta)
        prep = prepare_projection(fixture_ops, img.height, img.width)
        outside = prep.mask[:, :, 0] == 0.0
        assert np.array_equal(out[outside], img.data[outside])

    def test_range_containment(self, fixture_ops, car):
        img, _ = car
        rng = np.random.default_rng(6)
        for _ in range(3):
            delta = rng.uniform(0, 1, (40, 40, 3))
            out = project_patch_np(fixture_ops, img.data, delta)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_dimension_mismatch_rejected(self, fixture_ops, car):
        img, _ = car
        with pytest.raises(InputError):
            project_patch(fixture_ops, img, ImageBuffer.full(20, 20, 0.5))

    def test_jvp_matches_finite_differences_on_toy_instance(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.2, 0.8, (5, 5, 3))
        ops = ProjectionOperands(
            tps=identity_tps(),
            color=additive_law_model(gain=0.4),
            patch_shape=ImageBuffer.full(5, 5, 1.0),
        )
        u = rng.normal(size=(5, 5, 3))
        v = rng.normal(size=(5, 5, 3))
        d0 = rng.uniform(0.2, 0.8, (5, 5, 3))

        def loss(arr):
            return float((project_patch_np(ops, x, arr) * u).sum())

        tape = de.Tape()
        dvar = tape.input(d0)
        out = project_patch_var(tape, ops, x, dvar)
        tape.finalize(de.sum_all(de.mul(out, u)))
        vjp = de.backward(tape).of(dvar)
        lhs = float((vjp * v).sum())  # u^T J v via the reverse pass
        h = 1e-5
        rhs = (loss(d0 + h * v) - loss(d0 - h * v)) / (2 * h)
        assert abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-9) <= 1e-4


class TestComposeScene:
    def make_scene(self, mask_value=1.0, placement=(2, 3)):
        rng = np.random.default_rng(8)
        obj = ImageBuffer(rng.uniform(0, 1, (4, 5, 3)))
        mask = ImageBuffer.full(4, 5, mask_value)
        bg = ImageBuffer(rng.uniform(0, 1, (10, 12, 3)))
        return SceneSpec(object_img=obj, object_mask=mask, background=bg, placement=placement)

    def test_zero_mask_returns_background(self):
        scene = self.make_scene(mask_value=0.0)
        out = compose_scene(scene, scene.object_img)
        assert np.array_equal(out.data, scene.background.data)

    def test_full_mask_equal_sizes_returns_object(self):
        rng = np.random.default_rng(9)
        obj = ImageBuffer(rng.uniform(0, 1, (6, 6, 3)))
        scene = SceneSpec(
            object_img=obj, object_mask=ImageBuffer.full(6, 6, 1.0),
            background=ImageBuffer(rng.uniform(0, 1, (6, 6, 3))), placement=(0, 0),
        )
        out = compose_scene(scene, obj)
        assert np.array_equal(out.data, obj.data)

    def test_half_mask_blend_arithmetic(self):
        obj = ImageBuffer.full(3, 3, 0.2)
        scene = SceneSpec(
            object_img=obj, object_mask=ImageBuffer.full(3, 3, 0.5),
            background=ImageBuffer.full(3, 3, 0.8), placement=(0, 0),
        )
        out = compose_scene(scene, obj)
        assert np.allclose(out.data, 0.5, atol=1e-15)

    def test_placement_out_of_bounds(self):
        with pytest.raises(InputError):
            self.make_scene(placement=(8, 3))

    def test_blend_is_local_to_placement(self):
        scene = self.make_scene()
        out = compose_scene(scene, scene.object_img)
        r, c = scene.placement
        untouched = out.data.copy()
        untouched[r : r + 4, c : c + 5] = scene.background.data[r : r + 4, c : c + 5]
        assert np.array_equal(untouched, scene.background.data)


class TestSceneTransforms:
    def test_identity_transform_is_one_hot(self):
        op = object_to_background_warp(4, 5, 10, 12, (2, 3), TransformParams.identity())
        rng = np.random.default_rng(10)
        obj = rng.uniform(0, 1, (4, 5, 3))
        out = op.apply(obj)
        assert np.array_equal(out[2:6, 3:8], obj)
        assert out.sum() == pytest.approx(obj.sum())

    def test_render_frame_identity_matches_compose(self):
        img, mask = draw_car()
        bg = make_background(77)
        view = SceneView(
            label="t", object_img=img, object_mask=mask, operands=None, placement=(12, 4)
        )
        frame = render_frame_np(view, bg, TransformParams.identity())
        scene = SceneSpec(object_img=img, object_mask=mask, background=bg, placement=(12, 4))
        composed = compose_scene(scene, img)
        assert np.abs(frame.data - composed.data).max() <= 1e-12

    def test_scale_changes_footprint_area(self):
        img, mask = draw_car()
        bg = make_background(78)
        view = SceneView(
            label="t", object_img=img, object_mask=mask, operands=None, placement=(12, 4)
        )
        area = {}
        for s in (0.6, 1.0):
            op = object_to_background_warp(
                40, 56, 64, 64, (12, 4), TransformParams(scale=s)
            )
            area[s] = op.apply(mask.data)[:, :, 0].sum()
        assert area[0.6] == pytest.approx(area[1.0] * 0.36, rel=0.05)

    def test_render_frame_var_matches_np(self, fixture_ops):
        img, mask = draw_car()
        bg = make_background(79)
        view = SceneView(
            label="t", object_img=img, object_mask=mask,
            operands=fixture_ops, placement=(12, 4),
        )
        rng = np.random.default_rng(11)
        delta = ImageBuffer(rng.uniform(0, 1, (40, 40, 3)))
        params = TransformParams(
            scale=0.9, rotate_deg=4.0, dx=1.2, dy=-0.8, brightness=0.05,
            noise=0.01 * rng.standard_normal((64, 64, 3)),
        )
        frame_np = render_frame_np(view, bg, params, delta=delta)
        tape = de.Tape()
        dvar = tape.input(delta.data)
        scene_var, _ = render_frame_var(tape, view, bg, params, dvar)
        assert np.abs(frame_np.data - scene_var.value).max() <= 1e-12


class TestSceneBundle:
    def test_round_trip(self, tmp_path):
        img, mask = draw_car(0.1, 0.97)
        bgs = [make_background(1), make_background(2)]
        color = additive_law_model()
        save_scene_bundle(
            tmp_path / "b", label="+10", object_img=img, object_mask=mask,
            backgrounds=bgs, controls=checkerboard_controls(0.1, 0.97),
            color=color, placement=(12, 4), patch_size=(40, 40),
        )
        bundle = load_scene_bundle(tmp_path / "b")
        assert bundle.view.label == "+10"
        assert bundle.view.placement == (12, 4)
        assert bundle.patch_size == (40, 40)
        assert len(bundle.backgrounds) == 2
        assert np.abs(bundle.view.object_img.data - img.data).max() <= 1.0 / 255.0
        # the fitted geometry reproduces the stored controls
        cps = checkerboard_controls(0.1, 0.97)
        from projforge.geom_tps import apply_tps_points

        mapped = apply_tps_points(bundle.view.operands.tps, cps.source_array())
        assert np.abs(mapped - cps.target_array()).max() <= 1e-6

    def test_missing_pieces_reported(self, tmp_path):
        d = tmp_path / "incomplete"
        d.mkdir()
        (d / "scene.json").write_text(
            json.dumps({"view": "+00", "placement": [0, 0], "patch_size": [8, 8]})
        )
        with pytest.raises(InputError, match="controls.txt"):
            load_scene_bundle(d)

    def test_missing_dir(self, tmp_path):
        with pytest.raises(InputError):
            load_scene_bundle(tmp_path / "nope")
