import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from autodiff.exceptions import LabError, ShapeError

from .checkpoints import load_container, load_model, save_container, save_model
from .exceptions import CheckpointError, ModelSpecError, ScheduleError, UnknownConditionError
from .networks import EpsModel, ModelSpec, affine_coefficients, predict_eps, time_embedding
from .process import apply_offset_noise, forward_draw
from .schedules import CosineSchedule, LogSnrLinearSchedule, get_schedule

GRID = np.linspace(0.0, 1.0, 1001)


def small_model(seed=0, architecture='mlp', frozen=False):
    spec = ModelSpec(data_dim=2, hidden=(16, 16), architecture=architecture)
    model = EpsModel.initialize(spec, ['dog', 'cat'], seed=seed)
    rng = np.random.default_rng(seed + 100)
    # give the output layer non-zero weights so predictions are informative
    last = model.weights[-1]
    last.assign(rng.normal(0.0, 0.3, size=last.shape))
    return model.freeze() if frozen else model


class ScheduleTests(SimpleTestCase):
    def test_variance_preserving_on_grid(self):
        for sched in (CosineSchedule(), LogSnrLinearSchedule()):
            total = sched.alpha(GRID) ** 2 + sched.sigma(GRID) ** 2
            np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_log_snr_strictly_decreasing(self):
        for sched in (CosineSchedule(), LogSnrLinearSchedule()):
            self.assertTrue(np.all(np.diff(sched.log_snr(GRID[1:-1])) < 0))
            self.assertTrue(np.all(sched.d_log_snr(GRID[1:-1]) < 0))

    def test_log_snr_matches_alpha_sigma(self):
        for sched in (CosineSchedule(), LogSnrLinearSchedule()):
            recomputed = np.log(sched.alpha(GRID) ** 2 / sched.sigma(GRID) ** 2)
            np.testing.assert_allclose(recomputed, sched.log_snr(GRID), atol=1e-10)

    def test_derivative_matches_numeric_differentiation(self):
        sched = CosineSchedule()
        t = np.linspace(0.05, 0.95, 37)
        h = 1e-6
        numeric = (sched.log_snr(t + h) - sched.log_snr(t - h)) / (2 * h)
        np.testing.assert_allclose(sched.d_log_snr(t), numeric, rtol=1e-6)

    def test_default_weighting_is_plain_eps_prediction(self):
        sched = CosineSchedule()
        t = np.linspace(0.01, 0.99, 11)
        np.testing.assert_array_equal(sched.loss_scale(t), np.ones_like(t))
        np.testing.assert_allclose(-0.5 * sched.weight(t) * sched.d_log_snr(t), 1.0)

    def test_theoretical_beta_positive(self):
        self.assertTrue(np.all(CosineSchedule().beta_t(GRID[1:-1], 1000.0) > 0))

    def test_endpoints_clamped(self):
        self.assertTrue(np.isfinite(CosineSchedule().d_log_snr(0.0)))
        self.assertTrue(np.isfinite(CosineSchedule().d_log_snr(1.0)))

    def test_time_outside_unit_interval_rejected(self):
        with self.assertRaises(ScheduleError):
            CosineSchedule().alpha(1.5)

    def test_lookup_by_name(self):
        self.assertIsInstance(get_schedule('cosine'), CosineSchedule)
        with self.assertRaises(ScheduleError):
            get_schedule('quadratic')


class ForwardProcessTests(SimpleTestCase):
    class _Identity(CosineSchedule):
        def alpha(self, t):
            return np.ones_like(np.asarray(t, dtype=float))

        def sigma(self, t):
            return np.zeros_like(np.asarray(t, dtype=float))

    def test_zero_noise_endpoint(self):
        x = np.array([0.4, -1.3])
        np.testing.assert_array_equal(forward_draw(x, 0.3, np.ones(2), self._Identity()), x)

    def test_cosine_midpoint(self):
        z = forward_draw(np.array([1.0, 0.0]), 0.5, np.array([0.0, 1.0]), CosineSchedule())
        np.testing.assert_allclose(z, [0.70710678, 0.70710678], atol=1e-8)

    def test_zero_data_gives_scaled_noise(self):
        sched = CosineSchedule()
        eps = np.array([0.2, -0.7])
        np.testing.assert_array_equal(forward_draw(np.zeros(2), 0.4, eps, sched), sched.sigma(0.4) * eps)

    def test_linearity(self):
        sched = CosineSchedule()
        rng = np.random.default_rng(0)
        x, y, eps = rng.normal(size=(3, 4))
        a, b, t = 0.7, -1.9, 0.37
        lhs = forward_draw(a * x + b * y, t, eps, sched)
        rhs = a * forward_draw(x, t, 0 * eps, sched) + b * forward_draw(y, t, 0 * eps, sched) + sched.sigma(t) * eps
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_batched_times(self):
        sched = CosineSchedule()
        x = np.ones((3, 2))
        t = np.array([0.1, 0.5, 0.9])
        z = forward_draw(x, t, np.zeros((3, 2)), sched)
        np.testing.assert_allclose(z[:, 0], sched.alpha(t))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            forward_draw(np.ones(2), 0.5, np.ones(3), CosineSchedule())


class OffsetNoiseTests(SimpleTestCase):
    def test_zero_strength_is_identity(self):
        eps = np.array([0.3, -0.2])
        np.testing.assert_array_equal(apply_offset_noise(eps, 0.0, 1.7), eps)

    def test_shared_shift(self):
        np.testing.assert_allclose(apply_offset_noise(np.zeros(2), 0.1, 1.0), [0.1, 0.1])

    def test_negative_strength_rejected(self):
        with self.assertRaises(LabError):
            apply_offset_noise(np.zeros(2), -0.1, 1.0)

    def test_variance_is_one_plus_strength_squared(self):
        rng = np.random.default_rng(2024)
        n, strength = 100_000, 0.1
        eps = rng.standard_normal((n, 3))
        shifted = apply_offset_noise(eps, strength, rng.standard_normal(n))
        expected = 1.0 + strength ** 2
        # the sample variance of n normals has standard deviation ~ sqrt(2/n) * variance
        band = 3.0 * np.sqrt(2.0 / n) * expected
        for column in shifted.T:
            self.assertLess(abs(column.var() - expected), band)


class EpsModelTests(SimpleTestCase):
    def test_zero_initialised_output(self):
        model = EpsModel.initialize(ModelSpec(data_dim=3, hidden=(8,)), ['dog'], seed=1)
        rng = np.random.default_rng(0)
        out = model.predict(rng.normal(size=(5, 3)), 'dog', rng.uniform(size=5))
        np.testing.assert_array_equal(out, np.zeros((5, 3)))

    def test_prediction_shape_and_determinism(self):
        model = small_model()
        z = np.array([0.5, -0.25])
        first = predict_eps(model, z, 'dog', 0.3)
        second = predict_eps(model, z, 'dog', 0.3)
        self.assertEqual(first.shape, z.shape)
        np.testing.assert_array_equal(first, second)

    def test_null_condition(self):
        model = small_model()
        z = np.array([0.5, -0.25])
        np.testing.assert_array_equal(model.predict(z, None, 0.3), model.predict(z, '<null>', 0.3))
        self.assertFalse(np.array_equal(model.predict(z, None, 0.3), model.predict(z, 'dog', 0.3)))

    def test_unknown_condition(self):
        with self.assertRaises(UnknownConditionError):
            small_model().predict(np.zeros(2), 'horse', 0.5)

    def test_prediction_times_outside_unit_interval_rejected(self):
        model = small_model()
        for t in (-0.1, 1.5, np.nan):
            with self.assertRaises(ScheduleError):
                predict_eps(model, np.zeros(2), 'dog', t)
        with self.assertRaises(ScheduleError):
            model.forward(np.zeros((2, 2)), 'dog', [0.5, 1.01])

    def test_time_endpoints_accepted(self):
        model = small_model()
        self.assertEqual(model.predict(np.zeros((2, 2)), 'dog', [0.0, 1.0]).shape, (2, 2))

    def test_invalid_spec_rejected(self):
        with self.assertRaises(ModelSpecError):
            ModelSpec(data_dim=2, architecture='unet')
        with self.assertRaises(ModelSpecError):
            ModelSpec(data_dim=0)
        spec = ModelSpec(data_dim=2, hidden=(4,))
        with self.assertRaises(ModelSpecError):
            EpsModel.initialize(spec, ['dog', 'dog'])

    def test_embedding_vector_condition_matches_id(self):
        model = small_model()
        z = np.array([[0.1, 0.2], [0.3, -0.4]])
        by_id = model.predict(z, 'cat', 0.6)
        by_vector = model.predict(z, model.condition_embedding('cat'), 0.6)
        np.testing.assert_array_equal(by_id, by_vector)

    def test_frozen_copy_is_immutable(self):
        model = small_model(frozen=True)
        before = model.checksum()
        self.assertEqual(model.trainable_parameters(), [])
        with self.assertRaises(LabError):
            model.weights[0].assign(np.zeros(model.weights[0].shape))
        self.assertEqual(model.checksum(), before)

    def test_linear_architecture_is_affine(self):
        model = small_model(architecture='linear')
        A, b = affine_coefficients(model, 'dog', 0.4, dim=2)
        z = np.array([0.8, -1.1])
        np.testing.assert_allclose(model.predict(z, 'dog', 0.4), A @ z + b, atol=1e-12)

    def test_time_embedding_contains_sigma(self):
        t = np.array([0.2, 0.7])
        np.testing.assert_allclose(time_embedding(t)[:, 0], CosineSchedule().sigma(t))


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_model_round_trip_is_bit_exact(self):
        model = small_model(seed=4, frozen=True)
        save_model(model, self.dir / 'model.dcl')
        loaded = load_model(self.dir / 'model.dcl')
        self.assertTrue(loaded.frozen)
        self.assertEqual(loaded.condition_names, model.condition_names)
        for (name, a), (_, b) in zip(model.parameters(), loaded.parameters()):
            self.assertEqual(a.values.tobytes(), b.values.tobytes(), name)

    def test_files_are_deterministic(self):
        model = small_model(seed=4)
        save_model(model, self.dir / 'a.dcl')
        save_model(model, self.dir / 'b.dcl')
        self.assertEqual((self.dir / 'a.dcl').read_bytes(), (self.dir / 'b.dcl').read_bytes())

    def test_corruption_detected(self):
        save_container(self.dir / 'c.dcl', 'model', {}, {'w': np.arange(4.0)})
        blob = bytearray((self.dir / 'c.dcl').read_bytes())
        blob[-1] ^= 0xFF
        (self.dir / 'c.dcl').write_bytes(bytes(blob))
        with self.assertRaises(CheckpointError):
            load_container(self.dir / 'c.dcl')

    def test_kind_checked(self):
        save_container(self.dir / 'd.dcl', 'adapter', {}, {'w': np.ones(2)})
        with self.assertRaises(CheckpointError):
            load_container(self.dir / 'd.dcl', kind='model')

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_container(self.dir / 'absent.dcl')
