import numpy as np
from django.test import SimpleTestCase
from scipy import special

from adapters.lora import LoraAdapter, TokenEmbedding, attach
from autodiff.gradcheck import numerical_gradient, relative_error
from autodiff.tensor import Tensor
from diffusion.networks import EpsModel, ModelSpec
from diffusion.process import ConditionedSample, NoiseDraws, draw_noise, forward_draw
from diffusion.schedules import CosineSchedule
from oracle.analytic import affine_deviation

from .exceptions import ObjectiveError, ReferenceModelError
from .losses import (
    BetaMode,
    DcoConfig,
    PriorPreservationConfig,
    dco_gradient_scale,
    dco_loss,
    dco_loss_estimate,
    delta_estimate,
    dm_loss,
    gradient_factorization_error,
    parameter_gradients,
    prior_preservation_loss,
    reference_conditions,
)

SCHED = CosineSchedule()
LN2 = 0.6931471805599453


class FixedModel:
    """Predicts the same noise for every input."""

    def __init__(self, prediction, frozen=False):
        self.prediction = np.atleast_2d(np.asarray(prediction, dtype=float))
        self.data_dim = self.prediction.shape[1]
        self.frozen = frozen

    def condition_embedding(self, c):
        return c

    def forward(self, z, conditions, t):
        return Tensor(np.broadcast_to(self.prediction, np.shape(z)).copy())


def one_sample(x=(0.0, 0.0), eps=(0.0, 0.0), t=0.5):
    return [ConditionedSample(np.array(x), 'dog')], NoiseDraws(t=[t], eps=[eps])


def reference(seed=0, architecture='mlp'):
    spec = ModelSpec(data_dim=2, hidden=(6, 6), architecture=architecture)
    model = EpsModel.initialize(spec, ['dog', 'cat'], seed=seed)
    rng = np.random.default_rng(seed + 1)
    model.weights[-1].assign(rng.normal(0.0, 0.4, size=model.weights[-1].shape))
    model.biases[-1].assign(rng.normal(0.0, 0.1, size=model.biases[-1].shape))
    return model.freeze()


def fine_tuned(phi, seed=0, scale=0.3, with_token=False):
    adapter = LoraAdapter.initialize(phi, rank=2, seed=seed)
    rng = np.random.default_rng(seed + 2)
    for _, tensor in adapter.parameters():
        tensor.assign(rng.normal(0.0, scale, size=tensor.shape))
    tokens = [TokenEmbedding.from_initializer(phi, 'sks', 'dog')] if with_token else []
    return attach(phi, adapter, tokens)


def batch_and_draws(n=3, seed=0, condition='dog'):
    rng = np.random.default_rng(seed)
    batch = [ConditionedSample(x, condition) for x in rng.normal(size=(n, 2))]
    return batch, draw_noise(rng, n, 2)


class ConfigTests(SimpleTestCase):
    def test_defaults(self):
        cfg = DcoConfig()
        self.assertEqual((cfg.beta_mode, cfg.beta_t), (BetaMode.CONSTANT, 1000.0))
        np.testing.assert_array_equal(cfg.temperature([0.1, 0.9], SCHED), [1000.0, 1000.0])

    def test_theoretical_temperature(self):
        cfg = DcoConfig(beta=2.0, beta_mode='theoretical')
        t = np.array([0.2, 0.5])
        np.testing.assert_allclose(cfg.temperature(t, SCHED), -SCHED.d_log_snr(t))
        self.assertTrue(np.all(cfg.temperature(np.linspace(0.01, 0.99, 50), SCHED) > 0))

    def test_invalid_values(self):
        with self.assertRaises(ObjectiveError):
            DcoConfig(beta=0.0)
        with self.assertRaises(ObjectiveError):
            PriorPreservationConfig(lambda_prior=-0.1)


class DmLossTests(SimpleTestCase):
    def test_perfect_prediction(self):
        batch, draws = one_sample(eps=(0.3, -0.2))
        self.assertEqual(dm_loss(FixedModel([0.3, -0.2]), batch, SCHED, draws).item(), 0.0)

    def test_unit_error(self):
        batch, draws = one_sample(eps=(-1.0, 0.0))
        self.assertEqual(dm_loss(FixedModel([0.0, 0.0]), batch, SCHED, draws).item(), 1.0)

    def test_matches_scalar_recomputation(self):
        phi = reference(3)
        theta = fine_tuned(phi, seed=3)
        batch, draws = batch_and_draws(5, seed=4)
        expected = 0.0
        for sample, t, eps in zip(batch, draws.t, draws.eps):
            z = forward_draw(sample.x, t, eps, SCHED)
            residual = theta.predict(z, sample.c, t) - eps
            expected += sum(r * r for r in residual) / len(batch)
        self.assertAlmostEqual(dm_loss(theta, batch, SCHED, draws).item(), expected, delta=1e-10)

    def test_empty_batch(self):
        with self.assertRaises(ObjectiveError):
            dm_loss(FixedModel([0.0]), [], SCHED, NoiseDraws(t=[0.5], eps=[[0.0]]))

    def test_draw_count_mismatch(self):
        batch, _ = one_sample()
        with self.assertRaises(ObjectiveError):
            dm_loss(FixedModel([0.0, 0.0]), batch, SCHED, NoiseDraws(t=[0.1, 0.2], eps=np.zeros((2, 2))))


class PriorPreservationTests(SimpleTestCase):
    def setUp(self):
        self.theta = fine_tuned(reference(5), seed=5)
        self.ref_batch, self.ref_draws = batch_and_draws(2, seed=6)
        self.prior_batch, self.prior_draws = batch_and_draws(3, seed=7, condition='cat')

    def loss(self, lambda_prior, prior_batch=None, prior_draws=None):
        return prior_preservation_loss(
            self.theta, self.ref_batch, prior_batch or self.prior_batch,
            PriorPreservationConfig(lambda_prior=lambda_prior), SCHED,
            self.ref_draws, prior_draws or self.prior_draws,
        ).item()

    def test_zero_weight_is_plain_loss(self):
        self.assertEqual(self.loss(0.0), dm_loss(self.theta, self.ref_batch, SCHED, self.ref_draws).item())

    def test_equal_components_double(self):
        plain = dm_loss(self.theta, self.ref_batch, SCHED, self.ref_draws).item()
        self.assertEqual(self.loss(1.0, self.ref_batch, self.ref_draws), 2 * plain)

    def test_half_weight_arithmetic(self):
        ref_batch, ref_draws = one_sample(eps=(np.sqrt(0.2), 0.0))
        prior_batch, prior_draws = one_sample(eps=(np.sqrt(0.4), 0.0))
        loss = prior_preservation_loss(
            FixedModel([0.0, 0.0]), ref_batch, prior_batch, PriorPreservationConfig(0.5), SCHED, ref_draws, prior_draws
        )
        self.assertAlmostEqual(loss.item(), 0.4, delta=1e-14)

    def test_empty_prior_batch(self):
        with self.assertRaises(ObjectiveError):
            prior_preservation_loss(self.theta, self.ref_batch, [], PriorPreservationConfig(), SCHED, self.ref_draws, self.ref_draws)


class DcoLossTests(SimpleTestCase):
    def test_identity_point_is_ln2(self):
        phi = reference(1)
        for with_token in (False, True):
            theta = attach(phi, LoraAdapter.initialize(phi, rank=4, seed=9),
                           [TokenEmbedding.from_initializer(phi, 'sks', 'dog')] if with_token else [])
            batch, draws = batch_and_draws(4, seed=2, condition='sks' if with_token else 'dog')
            self.assertAlmostEqual(dco_loss(theta, phi, batch, DcoConfig(), SCHED, draws).item(), LN2, delta=1e-12)

    def test_closed_form_values(self):
        batch, draws = one_sample()
        loss = dco_loss(FixedModel([1.0, 0.0]), FixedModel([0.0, 0.0], frozen=True), batch, DcoConfig(beta_t=1.0), SCHED, draws)
        self.assertAlmostEqual(loss.item(), 1.3132616875182228, delta=1e-15)
        loss = dco_loss(FixedModel([0.0, 0.0]), FixedModel([0.1, 0.0], frozen=True), batch, DcoConfig(), SCHED, draws)
        self.assertAlmostEqual(loss.item(), 4.5398899e-5, delta=1e-12)

    def test_reference_must_be_frozen(self):
        batch, draws = one_sample()
        with self.assertRaises(ReferenceModelError):
            dco_loss(FixedModel([0.0, 0.0]), FixedModel([0.0, 0.0]), batch, DcoConfig(), SCHED, draws)

    def test_reference_dimension_checked(self):
        batch, draws = one_sample()
        with self.assertRaises(ReferenceModelError):
            dco_loss(FixedModel([0.0, 0.0]), FixedModel([0.0], frozen=True), batch, DcoConfig(), SCHED, draws)

    def test_both_branches_see_the_same_draws(self):
        phi = reference(2)
        theta = fine_tuned(phi, seed=2)
        batch, draws = batch_and_draws(3, seed=3)
        _, other = batch_and_draws(3, seed=30)
        cfg = DcoConfig(beta_t=5.0)

        def errors(model, c_of, d):
            out = []
            for sample, t, eps in zip(batch, d.t, d.eps):
                z = forward_draw(sample.x, t, eps, SCHED)
                out.append(np.sum((model.predict(z, c_of(sample.c), t) - eps) ** 2))
            return np.array(out)

        ell_theta = errors(theta, lambda c: c, draws)
        coupled = np.mean(-special.log_expit(-5.0 * (ell_theta - errors(phi, theta.condition_embedding, draws))))
        decoupled = np.mean(-special.log_expit(-5.0 * (ell_theta - errors(phi, theta.condition_embedding, other))))
        loss = dco_loss(theta, phi, batch, cfg, SCHED, draws).item()
        self.assertAlmostEqual(loss, coupled, delta=1e-12)
        self.assertNotAlmostEqual(loss, decoupled, places=6)

    def test_monotone_in_fine_tuned_error(self):
        rng = np.random.default_rng(4)
        batch, draws = one_sample(eps=(0.2, -0.1))
        for _ in range(20):
            phi = FixedModel(rng.normal(size=2), frozen=True)
            direction = rng.normal(size=2)
            losses = [
                dco_loss(FixedModel(np.array([0.2, -0.1]) + r * direction), phi, batch, DcoConfig(beta_t=3.0), SCHED, draws).item()
                for r in (0.1, 0.5, 1.0, 2.0)
            ]
            self.assertTrue(all(a < b for a, b in zip(losses, losses[1:])))

    def test_gradient_scale(self):
        phi = reference(1)
        theta = attach(phi, LoraAdapter.initialize(phi, rank=2))
        batch, draws = batch_and_draws(3, seed=5)
        np.testing.assert_array_equal(dco_gradient_scale(theta, phi, batch, DcoConfig(), SCHED, draws), 0.5)
        one, one_draw = one_sample()
        worse = dco_gradient_scale(FixedModel([1.0, 0.0]), FixedModel([0.0, 0.0], frozen=True), one, DcoConfig(), SCHED, one_draw)
        self.assertAlmostEqual(worse[0], 1.0, delta=1e-12)

    def test_gradient_factorization(self):
        for seed, cfg in ((0, DcoConfig()), (1, DcoConfig(beta_t=3.0)), (2, DcoConfig(beta=0.5, beta_mode='theoretical'))):
            phi = reference(seed)
            theta = fine_tuned(phi, seed=seed, scale=0.05, with_token=True)
            batch, draws = batch_and_draws(4, seed=seed, condition='sks')
            self.assertLess(gradient_factorization_error(theta, phi, batch, cfg, SCHED, draws), 1e-8)


class GradientCheckTests(SimpleTestCase):
    def assertGradientsMatch(self, loss_fn, params):
        analytic = parameter_gradients(loss_fn, params)
        for param in params:
            numeric = numerical_gradient(loss_fn, param)
            self.assertLess(relative_error(analytic[param.node_id], numeric), 1e-4)

    def setUp(self):
        self.phi = reference(7)
        self.theta = fine_tuned(self.phi, seed=7, with_token=True)
        self.batch, self.draws = batch_and_draws(3, seed=8, condition='sks')
        self.params = self.theta.trainable_parameters()

    def test_dm_loss(self):
        self.assertGradientsMatch(lambda: dm_loss(self.theta, self.batch, SCHED, self.draws), self.params)

    def test_prior_preservation_loss(self):
        prior, prior_draws = batch_and_draws(2, seed=9, condition='dog')
        cfg = PriorPreservationConfig(lambda_prior=0.5)
        self.assertGradientsMatch(
            lambda: prior_preservation_loss(self.theta, self.batch, prior, cfg, SCHED, self.draws, prior_draws),
            self.params,
        )

    def test_dco_loss(self):
        cfg = DcoConfig(beta_t=10.0)
        snapshot = reference_conditions(self.theta, [s.c for s in self.batch])
        self.assertGradientsMatch(
            lambda: dco_loss(self.theta, self.phi, self.batch, cfg, SCHED, self.draws, ref_conditions=snapshot),
            self.params,
        )

    def test_reference_sees_the_token_snapshot(self):
        cfg = DcoConfig(beta_t=10.0)
        snapshot = reference_conditions(self.theta, [s.c for s in self.batch])
        implicit = dco_loss(self.theta, self.phi, self.batch, cfg, SCHED, self.draws).item()
        explicit = dco_loss(self.theta, self.phi, self.batch, cfg, SCHED, self.draws, ref_conditions=snapshot).item()
        self.assertEqual(implicit, explicit)

        token = self.theta.tokens['sks'].vector
        token.assign(token.values + 0.5)
        moved = dco_loss(self.theta, self.phi, self.batch, cfg, SCHED, self.draws, ref_conditions=snapshot).item()
        self.assertNotEqual(moved, explicit)
        np.testing.assert_array_equal(snapshot[0] + 0.5, token.values.reshape(-1))

    def test_snapshot_must_match_the_batch(self):
        with self.assertRaises(ObjectiveError):
            dco_loss(self.theta, self.phi, self.batch, DcoConfig(), SCHED, self.draws, ref_conditions=[np.zeros(8)])

    def test_reference_receives_no_gradient(self):
        self.assertEqual(self.phi.trainable_parameters(), [])
        before = self.phi.checksum()
        parameter_gradients(lambda: dco_loss(self.theta, self.phi, self.batch, DcoConfig(), SCHED, self.draws), self.params)
        self.assertEqual(self.phi.checksum(), before)


class DeltaEstimateTests(SimpleTestCase):
    def test_zero_at_identity(self):
        phi = reference(1)
        theta = attach(phi, LoraAdapter.initialize(phi, rank=2))
        batch, _ = batch_and_draws(2)
        estimate = delta_estimate(theta, phi, batch, SCHED, n_draws=3, grid_size=16)
        self.assertEqual((estimate.value, estimate.stderr), (0.0, 0.0))

    def test_needs_draws(self):
        phi = reference(1)
        batch, _ = batch_and_draws(1)
        with self.assertRaises(ObjectiveError):
            delta_estimate(attach(phi, LoraAdapter.initialize(phi, rank=2)), phi, batch, SCHED, n_draws=0)

    def test_matches_closed_form_for_affine_models(self):
        phi = reference(11, architecture='linear')
        theta = fine_tuned(phi, seed=11, scale=0.2)
        batch, _ = batch_and_draws(2, seed=12)
        estimate = delta_estimate(theta, phi, batch, SCHED, n_draws=200, grid_size=64, seed=13)
        exact = np.mean([
            affine_deviation(theta, phi, s.x, s.c, SCHED, grid_size=64, phi_condition=theta.condition_embedding(s.c))
            for s in batch
        ])
        self.assertGreater(estimate.stderr, 0.0)
        self.assertLess(abs(estimate.value - exact), 3 * estimate.stderr)

    def test_weighted_deviation_reduces_to_error_difference(self):
        phi = reference(11, architecture='linear')
        theta = fine_tuned(phi, seed=11, scale=0.2)
        batch, _ = batch_and_draws(1, seed=12)
        weighted = delta_estimate(theta, phi, batch, SCHED, n_draws=4, grid_size=8, weighted=True)
        plain = delta_estimate(theta, phi, batch, SCHED, n_draws=4, grid_size=8)
        self.assertNotAlmostEqual(weighted.value, plain.value, places=6)
        exact = affine_deviation(theta, phi, batch[0].x, 'dog', SCHED, grid_size=8, weighted=True,
                                 phi_condition=theta.condition_embedding('dog'))
        self.assertLess(abs(weighted.value - exact), 4 * weighted.stderr + 1e-12)

    def test_jensen_bound(self):
        for seed in range(20):
            phi = reference(seed)
            theta = fine_tuned(phi, seed=seed + 100, scale=0.1)
            batch, _ = batch_and_draws(2, seed=seed)
            cfg = DcoConfig(beta=2.0, beta_mode=BetaMode.THEORETICAL)
            delta = delta_estimate(theta, phi, batch, SCHED, n_draws=8, grid_size=64, seed=seed)
            loss = dco_loss_estimate(theta, phi, batch, cfg, SCHED, n_draws=8, grid_size=64, seed=seed)
            bound = -special.log_expit(cfg.beta * delta.value)
            self.assertLessEqual(bound, loss.value + 3 * loss.stderr)
