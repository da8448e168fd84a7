import numpy as np
import pytest

from projforge import diffengine as de
from projforge.colormap import (
    CaptureLaw,
    ColorDataset,
    ColorModel,
    ColorSample,
    ColorTrainConfig,
    additive_law_model,
    apply_color_map,
    best_constant_l1,
    get_capture_law,
    load_color_model,
    mean_l1,
    predict_color,
    read_color_dataset,
    save_color_model,
    synthesize_grid_dataset,
    synthesize_random_dataset,
    train_color_model,
    write_color_dataset,
)
from projforge.errors import InputError
from projforge.imagecore import ImageBuffer


class TestPredict:
    def test_zero_parameters_give_black(self):
        m = ColorModel(
            w1=np.zeros((6, 8)), b1=np.zeros(8), w2=np.zeros((8, 8)), b2=np.zeros(8),
            w3=np.zeros((8, 3)), b3=np.zeros(3), hidden=8,
        )
        out = predict_color(m, [0.3, 0.6, 0.9], [0.5, 0.5, 0.5])
        assert np.array_equal(out, np.zeros(3))

    def test_additive_law_model(self):
        m = additive_law_model()
        out = predict_color(m, [0.2, 0.2, 0.2], [1.0, 1.0, 1.0])
        assert np.abs(out - 0.7).max() <= 1e-6

    def test_additive_law_no_projection_is_identity(self):
        m = additive_law_model()
        s = np.array([0.3, 0.5, 0.7])
        assert np.array_equal(predict_color(m, s, [0.0, 0.0, 0.0]), s)

    def test_clamps_output(self):
        m = additive_law_model()
        out = predict_color(m, [0.9, 0.9, 0.9], [1.0, 1.0, 1.0])
        assert np.array_equal(out, np.ones(3))

    def test_rejects_out_of_range(self):
        m = additive_law_model()
        with pytest.raises(InputError):
            predict_color(m, [1.2, 0, 0], [0, 0, 0])

    def test_gradient_wrt_projected_matches_finite_differences(self):
        # random regressor biased into the interior of the clamp
        m = ColorModel.initialize(hidden=16, seed=21)
        m.w3 *= 0.2
        m.b3 += 0.5
        rng = np.random.default_rng(77)
        for trial in range(20):
            s = rng.uniform(0.1, 0.9, size=3)
            p0 = rng.uniform(0.1, 0.9, size=3)
            pred = m.forward(s[None], p0[None])[0]
            assert (pred > 0.0).all() and (pred < 1.0).all()

            def fn(tape, p):
                out = m.forward_var(tape, s[None], de.reshape(p, (1, 3)))
                return de.sum_all(out)

            rep = de.check_gradients(fn, [p0], step=1e-4, tolerance=1e-4, max_coords=None)
            assert rep.passed, (trial, rep.worst_rel_err)


class TestTraining:
    def test_single_repeated_sample_converges(self):
        sample = ColorSample([0.2, 0.4, 0.6], [0.8, 0.1, 0.3], [0.5, 0.3, 0.7])
        data = ColorDataset([sample] * 8)
        model, final = train_color_model(
            data, ColorTrainConfig(epochs=2000, batch_size=8, seed=1)
        )
        assert final <= 1e-3

    def test_synthetic_law_fit_beats_constant(self):
        law = get_capture_law("default")
        train = synthesize_random_dataset(law, 512, seed=7)
        held = synthesize_random_dataset(law, 128, seed=8)
        model, _ = train_color_model(train, ColorTrainConfig(seed=7))
        held_l1 = mean_l1(model, held, clamp=True)
        assert held_l1 <= 0.02
        assert best_constant_l1(held) / held_l1 >= 5.0

    def test_training_curve_monotone_when_smoothed(self):
        law = get_capture_law("default")
        train = synthesize_random_dataset(law, 256, seed=3)
        curve = []
        train_color_model(
            train,
            ColorTrainConfig(epochs=600, seed=3),
            on_epoch=lambda e, loss: curve.append(loss),
        )
        windows = np.asarray(curve).reshape(-1, 50).mean(axis=1)
        assert (np.diff(windows) <= 1e-6).all()

    def test_deterministic_parameters(self):
        law = get_capture_law("default")
        data = synthesize_random_dataset(law, 64, seed=2)
        cfg = ColorTrainConfig(epochs=50, seed=9)
        m1, l1 = train_color_model(data, cfg)
        m2, l2 = train_color_model(data, cfg)
        assert l1 == l2
        for a, b in zip(m1.params(), m2.params()):
            assert np.array_equal(a, b)

    def test_empty_dataset_rejected(self):
        with pytest.raises(InputError):
            train_color_model(ColorDataset([]), ColorTrainConfig(epochs=1))

    def test_bad_config_rejected(self):
        data = synthesize_random_dataset(get_capture_law("default"), 8, seed=0)
        with pytest.raises(InputError):
            train_color_model(data, ColorTrainConfig(step_size=0.0))


class TestApplyColorMap:
    def test_zero_mask_zero_output(self):
        m = additive_law_model()
        img = ImageBuffer(np.random.default_rng(0).uniform(0, 1, (5, 5, 3)))
        out = apply_color_map(m, img, img, ImageBuffer.full(5, 5, 0.0))
        assert np.array_equal(out.data, np.zeros((5, 5, 3)))

    def test_full_mask_matches_per_pixel_loop(self):
        rng = np.random.default_rng(1)
        m = additive_law_model()
        surface = ImageBuffer(rng.uniform(0, 0.5, (4, 6, 3)))
        projected = ImageBuffer(rng.uniform(0, 1, (4, 6, 3)))
        out = apply_color_map(m, surface, projected, ImageBuffer.full(4, 6, 1.0))
        for y in range(4):
            for x in range(6):
                want = predict_color(m, surface.data[y, x], projected.data[y, x])
                assert np.abs(out.data[y, x] - want).max() <= 1e-6

    def test_single_pixel_mask_is_local(self):
        rng = np.random.default_rng(2)
        m = additive_law_model()
        img = ImageBuffer(rng.uniform(0, 1, (5, 5, 3)))
        mask = np.zeros((5, 5, 3))
        mask[2, 3] = 1.0
        out = apply_color_map(m, img, img, ImageBuffer(mask))
        nonzero = np.argwhere(out.data.sum(axis=2) > 0)
        assert nonzero.tolist() == [[2, 3]]

    def test_dimension_mismatch(self):
        m = additive_law_model()
        a = ImageBuffer.full(4, 4, 0.5)
        b = ImageBuffer.full(4, 5, 0.5)
        with pytest.raises(InputError):
            apply_color_map(m, a, b, a)

    def test_outputs_in_unit_interval(self):
        rng = np.random.default_rng(3)
        m = ColorModel.initialize(seed=12)  # untrained, unbounded pre-clamp
        surface = ImageBuffer(rng.uniform(0, 1, (6, 6, 3)))
        projected = ImageBuffer(rng.uniform(0, 1, (6, 6, 3)))
        out = apply_color_map(m, surface, projected, ImageBuffer.full(6, 6, 1.0))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestDatasetAndModelFiles:
    def test_dataset_round_trip(self, tmp_path):
        law = get_capture_law("ambient-low")
        data = synthesize_random_dataset(law, 16, seed=4)
        path = tmp_path / "data.txt"
        write_color_dataset(data, path)
        back = read_color_dataset(path)
        for a, b in zip(data.samples, back.samples):
            assert np.array_equal(a.surface, b.surface)
            assert np.array_equal(a.projected, b.projected)
            assert np.array_equal(a.observed, b.observed)

    def test_malformed_dataset_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.1 0.2 0.3 0.4\n")
        with pytest.raises(InputError, match="bad.txt:1"):
            read_color_dataset(path)

    def test_model_round_trip_exact(self, tmp_path):
        model, _ = train_color_model(
            synthesize_random_dataset(get_capture_law("default"), 32, seed=5),
            ColorTrainConfig(epochs=20, seed=5),
        )
        path = tmp_path / "model.txt"
        save_color_model(model, path)
        back = load_color_model(path)
        for a, b in zip(model.params(), back.params()):
            assert np.array_equal(a, b)
        assert back.hidden == model.hidden and back.seed == model.seed

    def test_grid_dataset_shape(self):
        surfaces = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]])
        data = synthesize_grid_dataset(get_capture_law("default"), surfaces, steps=3)
        assert len(data) == 2 * 27

    def test_unknown_law_rejected(self):
        with pytest.raises(InputError):
            get_capture_law("nonexistent")

    def test_law_is_its_own_oracle(self):
        law = CaptureLaw("t", 0.25, 0.5, 0.1)
        s = np.array([[0.4, 0.4, 0.4]])
        p = np.array([[1.0, 0.0, 0.5]])
        assert np.allclose(law.apply(s, p), [[0.7, 0.2, 0.45]])

    def test_sample_validation(self):
        with pytest.raises(InputError):
            ColorSample([0.5, 0.5], [0, 0, 0], [0, 0, 0])
        with pytest.raises(InputError):
            ColorSample([1.5, 0, 0], [0, 0, 0], [0, 0, 0])
