import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag

from adapters.lora import LoraAdapter, TokenEmbedding, attach
from diffusion.networks import EpsModel, ModelSpec
from diffusion.schedules import CosineSchedule
from oracle.analytic import optimal_eps
from oracle.worlds import GaussianComponent, GaussianConceptWorld
from training.trainers import pretrain_base

from .exceptions import GuidanceError, SamplerError
from .guidance import (
    ClassifierFreeGuidance,
    ConsistencyGuidance,
    GuidanceConfig,
    cfg_eps,
    consistency_guided_eps,
    guided_predictor,
)
from .samplers import SamplerConfig, read_sample_dump, sample, write_sample_dump

SCHED = CosineSchedule()


class ConstantModel:
    """Predicts a fixed value per condition, whatever the latent."""

    def __init__(self, values, data_dim=1):
        self.values = values
        self.data_dim = data_dim

    def condition_embedding(self, c):
        return c

    def predict(self, z, c, t):
        return np.full(np.shape(z), float(self.values[c]))


class IdentitySchedule(CosineSchedule):
    def alpha(self, t):
        return np.ones_like(np.asarray(t, dtype=float))

    def sigma(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))


class VanishingSchedule(CosineSchedule):
    def alpha(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))


def models():
    spec = ModelSpec(data_dim=2, hidden=(8, 8))
    phi = EpsModel.initialize(spec, ['dog', 'cat'], seed=0)
    rng = np.random.default_rng(1)
    phi.weights[-1].assign(rng.normal(0.0, 0.4, size=phi.weights[-1].shape))
    phi = phi.freeze()
    adapter = LoraAdapter.initialize(phi, rank=2, seed=2)
    for _, tensor in adapter.parameters():
        tensor.assign(rng.normal(0.0, 0.3, size=tensor.shape))
    token = TokenEmbedding.from_initializer(phi, 'sks', 'dog')
    token.vector.assign(token.vector.values + 0.1)
    return attach(phi, adapter, [token]), phi


def latents(n=4, seed=3):
    return np.random.default_rng(seed).normal(size=(n, 2))


class CfgTests(SimpleTestCase):
    def test_unit_scale_is_conditional(self):
        _, phi = models()
        z = latents()
        np.testing.assert_array_equal(cfg_eps(phi, z, 'dog', 0.4, 1.0), phi.predict(z, 'dog', 0.4))

    def test_zero_scale_is_unconditional(self):
        _, phi = models()
        z = latents()
        np.testing.assert_array_equal(cfg_eps(phi, z, 'dog', 0.4, 0.0), phi.predict(z, None, 0.4))

    def test_extrapolation(self):
        model = ConstantModel({'c': 1.0, None: 0.0})
        np.testing.assert_array_equal(cfg_eps(model, np.zeros((1, 1)), 'c', 0.5, 2.0), [[2.0]])


class ConsistencyGuidanceTests(SimpleTestCase):
    def test_unit_scales_give_fine_tuned_prediction(self):
        theta, phi = models()
        z = latents()
        cfg = GuidanceConfig(omega_text=1.0, omega_con=1.0)
        for c in ('sks', 'dog'):
            np.testing.assert_array_equal(consistency_guided_eps(theta, phi, z, c, 0.3, cfg), theta.predict(z, c, 0.3))

    def test_zero_consistency_is_cfg_on_reference(self):
        theta, phi = models()
        z = latents()
        cfg = GuidanceConfig(omega_text=7.5, omega_con=0.0)
        np.testing.assert_array_equal(
            consistency_guided_eps(theta, phi, z, 'cat', 0.6, cfg), cfg_eps(phi, z, 'cat', 0.6, 7.5)
        )

    def test_telescoping(self):
        theta, phi = models()
        z = latents()
        for a in (0.0, 2.0, 7.5):
            guided = consistency_guided_eps(theta, phi, z, 'dog', 0.5, GuidanceConfig(omega_text=a, omega_con=1.0))
            expected = theta.predict(z, 'dog', 0.5) - phi.predict(z, 'dog', 0.5)
            np.testing.assert_allclose(guided - cfg_eps(phi, z, 'dog', 0.5, a), expected, rtol=0, atol=1e-12)

    def test_three_term_arithmetic(self):
        theta = ConstantModel({'c': 2.0})
        phi = ConstantModel({'c': 1.0, None: 0.0})
        cfg = GuidanceConfig(omega_text=3.0, omega_con=1.0)
        np.testing.assert_array_equal(consistency_guided_eps(theta, phi, np.zeros((1, 1)), 'c', 0.5, cfg), [[4.0]])

    def test_dimension_mismatch(self):
        with self.assertRaises(GuidanceError):
            consistency_guided_eps(ConstantModel({}, data_dim=2), ConstantModel({}), np.zeros((1, 1)), 'c', 0.5, GuidanceConfig())

    def test_config_defaults_and_validation(self):
        cfg = GuidanceConfig()
        self.assertEqual((cfg.omega_text, cfg.omega_con, cfg.cfg_scale), (7.5, 2.0, 7.5))
        with self.assertRaises(GuidanceError):
            GuidanceConfig(omega_con=-1.0)
        with self.assertRaises(GuidanceError):
            GuidanceConfig(omega_text=float('inf'))

    def test_predictor_choice(self):
        theta, phi = models()
        self.assertIsInstance(guided_predictor(theta, phi, 'sks', GuidanceConfig()), ConsistencyGuidance)
        plain = guided_predictor(theta, phi, 'sks', GuidanceConfig(plain_cfg=True, omega=3.0))
        self.assertIsInstance(plain, ClassifierFreeGuidance)
        self.assertEqual(plain.omega, 3.0)


class SamplerTests(SimpleTestCase):
    def test_zero_prediction_without_noise_returns_initial_draw(self):
        out = sample(lambda z, t: np.zeros_like(z), IdentitySchedule(), SamplerConfig(steps=1, seed=4), 3, 2)
        np.testing.assert_array_equal(out, np.random.default_rng(4).standard_normal((3, 2)))

    def test_deterministic(self):
        theta, phi = models()
        predictor = guided_predictor(theta, phi, 'sks', GuidanceConfig())
        cfg = SamplerConfig(steps=10, seed=7)
        np.testing.assert_array_equal(sample(predictor, SCHED, cfg, 5, 2), sample(predictor, SCHED, cfg, 5, 2))

    def test_oracle_predictor_recovers_mean(self):
        mu = 1.7
        world = GaussianConceptWorld({'a': [GaussianComponent(1.0, [mu], [[1.0]])]})
        n = 4096
        out = sample(lambda z, t: optimal_eps(world, z, 'a', t, SCHED), SCHED, SamplerConfig(steps=50, seed=0, t_max=1.0), n, 1)
        self.assertLess(abs(out.mean() - mu), 3.0 / np.sqrt(n))

    def test_refining_the_grid_converges(self):
        world = GaussianConceptWorld({'a': [GaussianComponent(1.0, [0.5, -0.5], np.diag([0.3, 2.0]))]})

        def oracle(z, t):
            return optimal_eps(world, z, 'a', t, SCHED)

        coarse, medium, fine = (sample(oracle, SCHED, SamplerConfig(steps=s, seed=1), 64, 2) for s in (12, 25, 50))
        self.assertLess(np.abs(fine - medium).max(), np.abs(medium - coarse).max())

    def test_clip_denoised(self):
        out = sample(lambda z, t: -10.0 * np.ones_like(z), SCHED, SamplerConfig(steps=5, clip_denoised=2.0), 4, 2)
        self.assertLessEqual(np.abs(out).max(), 2.0)

    def test_vanishing_alpha_rejected(self):
        with self.assertRaises(SamplerError):
            sample(lambda z, t: np.zeros_like(z), VanishingSchedule(), SamplerConfig(steps=2), 1, 1)

    def test_invalid_config(self):
        with self.assertRaises(SamplerError):
            SamplerConfig(steps=0)
        with self.assertRaises(SamplerError):
            SamplerConfig(t_min=1.0)
        with self.assertRaises(SamplerError):
            SamplerConfig(t_max=1.5)

    def test_grid_defaults(self):
        grid = SamplerConfig().grid
        self.assertEqual(grid.size, 51)
        self.assertEqual((grid[0], grid[-1]), (0.99, 1e-3))
        self.assertTrue(np.all(np.diff(grid) < 0))


@tag('slow')
class TrainedModelSamplingTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.world = GaussianConceptWorld({
            'dog': [GaussianComponent(1.0, [1.0, 1.0], 0.3 * np.eye(2))],
            'cat': [GaussianComponent(1.0, [-1.0, 1.0], 0.3 * np.eye(2))],
        })
        cls.base = pretrain_base(cls.world, ModelSpec(data_dim=2, hidden=(32, 32)), steps=1500, seed=0, batch_size=64)

    def test_default_config_lands_on_the_condition(self):
        out = sample(ClassifierFreeGuidance(self.base, 'dog', 1.0), SCHED, SamplerConfig(seed=3), 256, 2)
        self.assertLess(np.abs(out.mean(axis=0) - [1.0, 1.0]).max(), 0.4)
        self.assertLess(np.median(np.linalg.norm(out, axis=1)), 3.0)

    def test_clipping_bounds_samples_from_t_one(self):
        cfg = SamplerConfig(seed=3, t_max=1.0, clip_denoised=3.0)
        out = sample(ClassifierFreeGuidance(self.base, 'dog', 1.0), SCHED, cfg, 256, 2)
        self.assertLessEqual(np.abs(out).max(), 3.0)


class SampleDumpTests(SimpleTestCase):
    def test_dump_reads_back_exactly(self):
        rng = np.random.default_rng(0)
        rows = [
            {'seed': s, 'condition': 'sks', 'omega_text': 7.5, 'omega_con': w, 'x': rng.normal(size=3)}
            for s, w in ((0, 2.0), (1, 3.0))
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = write_sample_dump(Path(tmp) / 'samples.csv', rows, dim=3)
            header = path.read_text().splitlines()[0]
            loaded = list(read_sample_dump(path))
        self.assertEqual(header, 'seed,condition,omega_text,omega_con,x0,x1,x2')
        for row, (meta, x) in zip(rows, loaded):
            self.assertEqual(meta['omega_con'], row['omega_con'])
            self.assertEqual(x.tobytes(), row['x'].tobytes())
