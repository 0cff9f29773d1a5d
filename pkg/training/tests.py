import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag

from adapters.lora import LoraAdapter, attach
from autodiff.tensor import Tensor
from diffusion.checkpoints import save_model
from diffusion.networks import EpsModel, ModelSpec
from diffusion.process import draw_noise, forward_draw
from diffusion.schedules import CosineSchedule
from objectives.losses import DcoConfig, PriorPreservationConfig, delta_estimate
from oracle.worlds import GaussianComponent, GaussianConceptWorld

from .diagnostics import noise_distance_profile, write_deviation_report
from .exceptions import FrozenModelError, TrainingError
from .optim import Adam
from .trainers import (
    Objective,
    TrainConfig,
    finetune,
    pretrain_base,
    read_loss_trace,
    synthesize_prior_set,
)

SCHED = CosineSchedule()
LN2 = 0.6931471805599453


def toy_world():
    return GaussianConceptWorld(
        {
            'dog': [GaussianComponent(1.0, [1.0, 1.0], 0.3 * np.eye(2))],
            'cat': [GaussianComponent(1.0, [-1.0, 1.0], 0.3 * np.eye(2))],
            'wolf': [GaussianComponent(1.0, [1.5, -1.0], 0.2 * np.eye(2))],
        },
        pretrain=['dog', 'cat'],
    )


def toy_base(seed=0):
    model = EpsModel.initialize(ModelSpec(data_dim=2, hidden=(8, 8)), ['dog', 'cat'], seed=seed)
    rng = np.random.default_rng(seed + 1)
    model.weights[-1].assign(rng.normal(0.0, 0.4, size=model.weights[-1].shape))
    return model.freeze()


def reference_set(n=4, seed=5, label='dog'):
    return toy_world().conditioned_samples('wolf', n, np.random.default_rng(seed), label=label)


class AdamTests(SimpleTestCase):
    def test_first_step_moves_by_learning_rate(self):
        param = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        Adam([{'params': [param], 'lr': 0.1}]).step({param.node_id: np.array([0.5, -4.0, 1e-3])})
        np.testing.assert_allclose(param.values, [0.9, -1.9, 2.9], atol=1e-5)

    def test_minimizes_a_quadratic(self):
        param = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        optimizer = Adam([{'params': [param], 'lr': 0.05}])
        for _ in range(2000):
            optimizer.step({param.node_id: 2.0 * (param.values - np.array([0.5, 0.25]))})
        np.testing.assert_allclose(param.values, [0.5, 0.25], atol=1e-3)

    def test_groups_keep_their_learning_rates(self):
        a = Tensor(np.zeros(1), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        Adam([{'params': [a], 'lr': 5e-5}, {'params': [b], 'lr': 5e-4}]).step(
            {a.node_id: np.ones(1), b.node_id: np.ones(1)}
        )
        self.assertAlmostEqual(a.values[0], -5e-5, delta=1e-12)
        self.assertAlmostEqual(b.values[0], -5e-4, delta=1e-11)

    def test_missing_gradient_is_zero(self):
        param = Tensor(np.ones(2), requires_grad=True)
        Adam([{'params': [param], 'lr': 0.1}]).step({})
        np.testing.assert_array_equal(param.values, [1.0, 1.0])

    def test_frozen_parameter_rejected(self):
        with self.assertRaises(FrozenModelError):
            Adam([{'params': [toy_base().weights[0]], 'lr': 0.1}])

    def test_invalid_settings(self):
        param = Tensor(np.ones(1), requires_grad=True)
        with self.assertRaises(TrainingError):
            Adam([{'params': [param], 'lr': 0.0}])
        with self.assertRaises(TrainingError):
            Adam([{'params': [], 'lr': 0.1}])
        with self.assertRaises(TrainingError):
            Adam([{'params': [param], 'lr': 0.1}, {'params': [param], 'lr': 0.2}])


class TrainConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual(cfg.objective, Objective.DCO)
        self.assertEqual((cfg.steps, cfg.batch_size, cfg.rank), (2000, 1, 32))
        self.assertEqual((cfg.adapter_lr, cfg.embedding_lr), (5e-5, 5e-4))
        self.assertEqual(cfg.executed_steps, 2000)

    def test_objective_from_string(self):
        self.assertIs(TrainConfig(objective='dm-prior').objective, Objective.DM_PRIOR)
        with self.assertRaises(TrainingError):
            TrainConfig(objective='ppo')

    def test_invalid_values(self):
        for kwargs in ({'steps': 0}, {'adapter_lr': 0.0}, {'embedding_lr': -1.0}, {'batch_size': 0},
                       {'early_stop_steps': 3000}, {'token': 'sks'}):
            with self.assertRaises(TrainingError, msg=str(kwargs)):
                TrainConfig(**kwargs)

    def test_early_stopping(self):
        self.assertEqual(TrainConfig(steps=2000, early_stop_steps=1000).executed_steps, 1000)

    def test_snapshot_is_plain_data(self):
        snapshot = TrainConfig(objective='dco', dco=DcoConfig(beta_t=500.0), seed=3).snapshot()
        self.assertEqual(snapshot['objective'], 'dco')
        self.assertEqual(snapshot['dco'], {'beta': 1000.0, 'beta_mode': 'constant', 'beta_t': 500.0})
        self.assertEqual(snapshot['seed'], 3)


class PretrainTests(SimpleTestCase):
    def test_zero_steps_rejected(self):
        with self.assertRaises(TrainingError):
            pretrain_base(toy_world(), ModelSpec(data_dim=2, hidden=(4,)), steps=0)

    def test_dimension_mismatch(self):
        with self.assertRaises(TrainingError):
            pretrain_base(toy_world(), ModelSpec(data_dim=3, hidden=(4,)), steps=1)

    def test_returns_frozen_model_on_base_conditions(self):
        model = pretrain_base(toy_world(), ModelSpec(data_dim=2, hidden=(4,)), steps=3, batch_size=8)
        self.assertTrue(model.frozen)
        self.assertEqual(model.condition_names, ['<null>', 'dog', 'cat'])

    def test_same_seed_same_checkpoint(self):
        spec = ModelSpec(data_dim=2, hidden=(6,))
        with tempfile.TemporaryDirectory() as tmp:
            paths = []
            for name in ('a', 'b'):
                model = pretrain_base(toy_world(), spec, steps=20, seed=4, batch_size=16)
                paths.append(Path(tmp) / f'{name}.dcl')
                save_model(model, paths[-1])
            self.assertEqual(paths[0].read_bytes(), paths[1].read_bytes())

    @tag('slow')
    def test_linear_model_learns_unit_gaussian_noise(self):
        world = GaussianConceptWorld({'a': [GaussianComponent(1.0, [0.0], [[1.0]])]})
        model = pretrain_base(world, ModelSpec(data_dim=1, architecture='linear'), steps=2000, seed=0,
                              lr=5e-3, batch_size=64, condition_dropout=0.0)
        rng = np.random.default_rng(1)
        t = rng.uniform(0.05, 0.95, size=2000)
        z = rng.standard_normal((2000, 1))
        oracle = SCHED.sigma(t)[:, None] * z
        self.assertLess(np.mean((model.predict(z, 'a', t) - oracle) ** 2), 1e-2)


class FinetuneTests(SimpleTestCase):
    def setUp(self):
        self.base = toy_base()
        self.ref_set = reference_set()

    def test_dco_starts_at_ln2(self):
        cfg = TrainConfig(steps=3, rank=2, token='sks', initializer='dog', seed=1)
        record = finetune(self.base, reference_set(label='sks'), cfg)
        self.assertAlmostEqual(record.losses[0], LN2, delta=1e-10)
        self.assertEqual(record.grad_scales[0], 0.5)
        self.assertEqual(len(record.grad_scales), 3)

    def test_dm_first_loss_is_plain_error_of_the_same_draw(self):
        cfg = TrainConfig(objective='dm', steps=2, rank=2, seed=6)
        record = finetune(self.base, self.ref_set, cfg)
        rng = np.random.default_rng(6)
        sample = self.ref_set[rng.integers(len(self.ref_set), size=1)[0]]
        draws = draw_noise(rng, 1, 2)
        z = forward_draw(sample.x, draws.t[0], draws.eps[0], SCHED)
        expected = np.sum((self.base.predict(z, sample.c, draws.t[0]) - draws.eps[0]) ** 2)
        self.assertAlmostEqual(record.losses[0], expected, delta=1e-12)
        self.assertEqual(record.grad_scales, [])

    def test_only_adapter_and_token_change(self):
        before = self.base.checksum()
        cfg = TrainConfig(steps=5, rank=2, adapter_lr=1e-2, token='sks', initializer='dog')
        record = finetune(self.base, reference_set(label='sks'), cfg)
        self.assertEqual(self.base.checksum(), before)
        self.assertTrue(any(np.any(B.values) for _, B in record.adapter.layers.values()))
        self.assertFalse(np.array_equal(record.tokens[0].vector.values.reshape(-1), self.base.condition_embedding('dog')))

    def test_frozen_token_when_embedding_training_is_off(self):
        cfg = TrainConfig(steps=3, rank=2, token='sks', initializer='dog', train_embedding=False)
        record = finetune(self.base, reference_set(label='sks'), cfg)
        np.testing.assert_array_equal(record.tokens[0].vector.values.reshape(-1), self.base.condition_embedding('dog'))

    def test_trace_length_follows_executed_steps(self):
        record = finetune(self.base, self.ref_set, TrainConfig(steps=8, early_stop_steps=4, rank=2))
        self.assertEqual(len(record.losses), 4)

    def test_preconditions(self):
        with self.assertRaises(FrozenModelError):
            finetune(self.base.trainable_copy(), self.ref_set, TrainConfig(steps=1, rank=2))
        with self.assertRaises(TrainingError):
            finetune(self.base, [], TrainConfig(steps=1, rank=2))
        with self.assertRaises(TrainingError):
            finetune(self.base, self.ref_set, TrainConfig(objective='dm-prior', steps=1, rank=2))

    def test_prior_preservation_run(self):
        prior = synthesize_prior_set(self.base, 'dog', 4, seed=2, steps=5)
        self.assertEqual([s.c for s in prior], ['dog'] * 4)
        cfg = TrainConfig(objective='dm-prior', steps=3, rank=2, prior=PriorPreservationConfig(1.0, tuple(prior)))
        record = finetune(self.base, self.ref_set, cfg)
        self.assertEqual(len(record.losses), 3)
        self.assertEqual(record.config.snapshot()['prior']['prior_set_size'], 4)

    def test_prior_synthesis_is_deterministic(self):
        first = synthesize_prior_set(self.base, 'cat', 3, seed=7, steps=4)
        second = synthesize_prior_set(self.base, 'cat', 3, seed=7, steps=4)
        for a, b in zip(first, second):
            self.assertEqual(a.x.tobytes(), b.x.tobytes())

    def test_reproducible_run_directories(self):
        cfg = TrainConfig(steps=6, rank=2, adapter_lr=1e-3, token='sks', initializer='dog', seed=9)
        ref = reference_set(label='sks')
        with tempfile.TemporaryDirectory() as tmp:
            dirs = [finetune(self.base, ref, cfg).save(Path(tmp) / name) for name in ('a', 'b')]
            for name in ('config.yaml', 'losses.csv', 'adapter.dcl'):
                self.assertEqual((dirs[0] / name).read_bytes(), (dirs[1] / name).read_bytes(), name)
            losses, scales = read_loss_trace(dirs[0] / 'losses.csv')
        record = finetune(self.base, ref, cfg)
        self.assertEqual(losses, record.losses)
        self.assertEqual(scales, record.grad_scales)

    @tag('slow')
    def test_dco_run_prefers_the_reference_set(self):
        cfg = TrainConfig(steps=200, rank=4, adapter_lr=5e-3, embedding_lr=5e-3, token='sks', initializer='dog')
        ref = reference_set(label='sks')
        record = finetune(self.base, ref, cfg)
        estimate = delta_estimate(record.model, self.base, ref, SCHED, n_draws=20, grid_size=16)
        self.assertGreater(estimate.value, 0.0)


class NoiseDistanceTests(SimpleTestCase):
    def setUp(self):
        self.base = toy_base()
        self.ref_set = reference_set(2)

    def test_identity_is_zero(self):
        theta = attach(self.base, LoraAdapter.initialize(self.base, rank=2))
        report = noise_distance_profile(theta, self.base, self.ref_set, t_grid=[0.1, 0.5, 0.9], n_noise=5)
        np.testing.assert_array_equal(report.mean_distance, 0.0)
        self.assertEqual(report.overall, 0.0)

    def test_distances_are_non_negative(self):
        adapter = LoraAdapter.initialize(self.base, rank=2, seed=1)
        for _, tensor in adapter.parameters():
            tensor.assign(np.random.default_rng(2).normal(0.0, 0.3, size=tensor.shape))
        report = noise_distance_profile(attach(self.base, adapter), self.base, self.ref_set, n_noise=4)
        self.assertEqual(report.t_grid.size, 64)
        self.assertTrue(np.all(report.mean_distance >= 0))
        self.assertGreater(report.overall, 0.0)
        self.assertAlmostEqual(report.overall, float(np.mean(report.mean_distance)))

    def test_invalid_arguments(self):
        theta = attach(self.base, LoraAdapter.initialize(self.base, rank=2))
        with self.assertRaises(TrainingError):
            noise_distance_profile(theta, self.base, self.ref_set, n_noise=0)
        with self.assertRaises(TrainingError):
            noise_distance_profile(theta, self.base, self.ref_set, t_grid=[], n_noise=2)

    def test_doubling_draws_halves_variance(self):
        adapter = LoraAdapter.initialize(self.base, rank=2, seed=1)
        for _, tensor in adapter.parameters():
            tensor.assign(np.random.default_rng(3).normal(0.0, 0.3, size=tensor.shape))
        theta = attach(self.base, adapter)
        small = noise_distance_profile(theta, self.base, self.ref_set[:1], t_grid=[0.5], n_noise=2000, seed=1)
        large = noise_distance_profile(theta, self.base, self.ref_set[:1], t_grid=[0.5], n_noise=4000, seed=2)
        ratio = (large.stderr[0] / small.stderr[0]) ** 2
        self.assertGreater(ratio, 0.35)
        self.assertLess(ratio, 0.65)

    def test_report_csv(self):
        theta = attach(self.base, LoraAdapter.initialize(self.base, rank=2))
        report = noise_distance_profile(theta, self.base, self.ref_set, t_grid=[0.25, 0.75], n_noise=2)
        with tempfile.TemporaryDirectory() as tmp:
            lines = write_deviation_report(Path(tmp) / 'profile.csv', report).read_text().splitlines()
        self.assertEqual(lines, ['t,mean_distance,stderr', '0.25,0.0,0.0', '0.75,0.0,0.0'])


@tag('slow')
class BetaAblationTests(SimpleTestCase):
    """Higher DCO temperatures keep the fine-tuned model closer to its base.

    Runs with the same seed see the same minibatches and noise draws, so only the
    temperature differs between them.
    """

    TEMPERATURES = (0.25, 1.0, 4.0)

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        world = toy_world()
        cls.base = pretrain_base(world, ModelSpec(data_dim=2, hidden=(16, 16)), steps=400, seed=0, batch_size=64)
        cls.ref_set = world.conditioned_samples('wolf', 4, np.random.default_rng(11), label='sks')

    def distance(self, objective, seed, beta_t=1000.0):
        cfg = TrainConfig(
            objective=objective, steps=300, rank=4, adapter_lr=5e-3, embedding_lr=5e-3,
            token='sks', initializer='dog', seed=seed, dco=DcoConfig(beta_t=beta_t),
        )
        record = finetune(self.base, self.ref_set, cfg)
        return noise_distance_profile(
            record.model, self.base, self.ref_set, t_grid=np.linspace(0.05, 0.95, 16), n_noise=20, seed=seed
        ).overall

    def test_noise_distance_falls_as_temperature_grows(self):
        monotone = 0
        for seed in range(5):
            by_beta = [self.distance(Objective.DCO, seed, beta_t) for beta_t in self.TEMPERATURES]
            if by_beta[0] >= by_beta[1] >= by_beta[2]:
                monotone += 1
        self.assertGreaterEqual(monotone, 4)

    def test_dco_stays_closer_than_dm(self):
        for seed in range(5):
            self.assertLess(self.distance(Objective.DCO, seed), self.distance(Objective.DM, seed))
