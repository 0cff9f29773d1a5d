import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy import integrate, stats

from diffusion.networks import EpsModel, ModelSpec
from diffusion.schedules import CosineSchedule

from .analytic import (
    ConsistencyFunction,
    Gaussian,
    affine_deviation,
    denoising_step_kl,
    expected_eps_error,
    gaussian_kl,
    kl_rate,
    marginal_log_density,
    optimal_eps,
    residual_moments,
    tilted_distribution,
)
from .exceptions import OracleError, WorldError
from .metrics import consistency_score, prompt_fidelity, reference_bandwidth
from .worlds import GaussianComponent, GaussianConceptWorld, load_world, world_from_mapping

SCHED = CosineSchedule()


def unit_world(mean=0.0):
    return GaussianConceptWorld({'a': [GaussianComponent(1.0, [mean], [[1.0]])]})


def plane_world():
    return world_from_mapping({
        'seed': 3,
        'conditions': {
            'dog': {'components': [
                {'weight': 2, 'mean': [1.0, -0.5], 'cov': [[0.5, 0.1], [0.1, 0.3]]},
                {'weight': 1, 'mean': [-1.0, 0.8], 'cov_factor': [[0.4, 0.0], [0.2, 0.3]]},
            ]},
            'cat': {'components': [{'mean': [-2.0, -2.0], 'cov': [[0.2, 0.0], [0.0, 0.2]]}]},
            'sks': {'pretrain': False, 'components': [{'mean': [0.5, 1.5], 'cov': [[0.05, 0.0], [0.0, 0.05]]}]},
        },
    })


def linear_model(seed, scale=0.3):
    model = EpsModel.initialize(ModelSpec(data_dim=2, architecture='linear'), ['dog'], seed=seed)
    rng = np.random.default_rng(seed + 7)
    model.weights[-1].assign(rng.normal(0.0, scale, size=model.weights[-1].shape))
    model.biases[-1].assign(rng.normal(0.0, scale, size=model.biases[-1].shape))
    return model


class WorldTests(SimpleTestCase):
    def test_mapping_normalises_weights_and_flags(self):
        world = plane_world()
        self.assertEqual(world.dim, 2)
        self.assertAlmostEqual(sum(c.weight for c in world.components('dog')), 1.0)
        self.assertEqual(world.pretrain_conditions, ['dog', 'cat'])
        np.testing.assert_allclose(world.components('dog')[1].cov, [[0.16, 0.08], [0.08, 0.13]])

    def test_invalid_file_reports_field_errors(self):
        with self.assertRaises(WorldError) as ctx:
            world_from_mapping({'conditions': {'dog': {'components': [{'mean': [0.0]}]}}})
        self.assertIn('conditions', ctx.exception.errors)

    def test_mixed_dimensions_rejected(self):
        with self.assertRaises(WorldError):
            world_from_mapping({'conditions': {
                'a': {'components': [{'mean': [0.0], 'cov': [[1.0]]}]},
                'b': {'components': [{'mean': [0.0, 0.0], 'cov': [[1.0, 0.0], [0.0, 1.0]]}]},
            }})

    def test_degenerate_covariance_rejected(self):
        with self.assertRaises(WorldError):
            GaussianConceptWorld({'a': [GaussianComponent(1.0, [0.0, 0.0], np.zeros((2, 2)))]})

    def test_load_from_yaml(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'world.yaml'
            path.write_text(
                "seed: 5\n"
                "conditions:\n"
                "  dog:\n"
                "    components:\n"
                "      - mean: [0.0, 1.0]\n"
                "        cov: [[1.0, 0.0], [0.0, 1.0]]\n"
            )
            world = load_world(path)
        self.assertEqual(world.seed, 5)
        self.assertEqual(world.dim, 2)

    def test_sampling_is_seeded(self):
        world = plane_world()
        first = world.sample('dog', 50, np.random.default_rng(1))
        second = world.sample('dog', 50, np.random.default_rng(1))
        np.testing.assert_array_equal(first, second)
        self.assertEqual(first.shape, (50, 2))

    def test_unknown_condition(self):
        with self.assertRaises(WorldError):
            plane_world().sample('horse', 1, np.random.default_rng(0))


class OptimalEpsTests(SimpleTestCase):
    def test_unit_gaussian_gives_sigma_z(self):
        world = unit_world()
        for t in (0.1, 0.5, 0.9):
            z = np.array([0.7])
            np.testing.assert_allclose(optimal_eps(world, z, 'a', t, SCHED), SCHED.sigma(t) * z, atol=1e-14)

    def test_zero_at_scaled_mean(self):
        world = unit_world(mean=1.3)
        t = 0.4
        np.testing.assert_allclose(optimal_eps(world, SCHED.alpha(t) * np.array([1.3]), 'a', t, SCHED), 0.0, atol=1e-15)

    def test_matches_finite_difference_score(self):
        world = plane_world()
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(5):
            z, t = rng.normal(size=2), rng.uniform(0.1, 0.9)
            score = np.zeros(2)
            for i in range(2):
                step = np.eye(2)[i] * h
                up = marginal_log_density(world, z + step, 'dog', t, SCHED)[0]
                down = marginal_log_density(world, z - step, 'dog', t, SCHED)[0]
                score[i] = (up - down) / (2 * h)
            np.testing.assert_allclose(optimal_eps(world, z, 'dog', t, SCHED), -SCHED.sigma(t) * score, atol=1e-6)

    def test_beats_perturbed_predictors(self):
        world = plane_world()
        rng = np.random.default_rng(5)
        n, t = 20_000, 0.45
        x = world.sample('dog', n, rng)
        eps = rng.standard_normal((n, 2))
        z = SCHED.alpha(t) * x + SCHED.sigma(t) * eps
        best = optimal_eps(world, z, 'dog', t, SCHED)
        baseline = np.mean(np.sum((best - eps) ** 2, axis=1))
        for _ in range(5):
            shift = rng.normal(size=2)
            shift *= 0.3 / np.linalg.norm(shift)
            mix = rng.normal(size=(2, 2))
            mix *= 0.3 / np.linalg.norm(mix)
            for perturbed in (best + shift, best + z @ mix.T):
                self.assertGreater(np.mean(np.sum((perturbed - eps) ** 2, axis=1)), baseline)


class GaussianKlTests(SimpleTestCase):
    def test_identical_is_zero(self):
        S = np.array([[2.0, 0.3], [0.3, 1.0]])
        self.assertAlmostEqual(gaussian_kl([1.0, 2.0], S, [1.0, 2.0], S), 0.0, places=14)

    def test_unit_shift(self):
        self.assertAlmostEqual(gaussian_kl([0.0], [[1.0]], [1.0], [[1.0]]), 0.5, places=14)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(0)
        F1, F2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        S1, S2 = F1 @ F1.T + np.eye(3), F2 @ F2.T + np.eye(3)
        m1, m2 = rng.normal(size=3), rng.normal(size=3)
        draws = rng.multivariate_normal(m1, S1, size=1_000_000)
        ratio = stats.multivariate_normal.logpdf(draws, m1, S1) - stats.multivariate_normal.logpdf(draws, m2, S2)
        stderr = ratio.std() / np.sqrt(ratio.size)
        self.assertLess(abs(gaussian_kl(m1, S1, m2, S2) - ratio.mean()), 3 * stderr)

    def test_non_positive_definite_rejected(self):
        with self.assertRaises(OracleError):
            gaussian_kl([0.0], [[-1.0]], [0.0], [[1.0]])


class TiltTests(SimpleTestCase):
    def setUp(self):
        self.base = Gaussian([0.3, -0.2], [[1.5, 0.4], [0.4, 0.8]])

    def test_zero_function_leaves_base(self):
        result = tilted_distribution(self.base, ConsistencyFunction.zero(2), 3.0)
        np.testing.assert_allclose(result.gaussian.mean, self.base.mean, atol=1e-12)
        np.testing.assert_allclose(result.gaussian.cov, self.base.cov, atol=1e-12)
        self.assertAlmostEqual(result.log_normalizer, 0.0, places=12)

    def test_vanishing_tilt(self):
        f = ConsistencyFunction.toward([1.0, 1.0], scale=2.0)
        result = tilted_distribution(self.base, f, 1e9)
        distance = np.linalg.norm(result.gaussian.mean - self.base.mean) + np.linalg.norm(result.gaussian.cov - self.base.cov)
        self.assertLess(distance, 1e-6)

    def test_completed_square_by_hand(self):
        result = tilted_distribution(Gaussian([0.0], [[1.0]]), ConsistencyFunction([[-0.5]], [0.0]), 1.0)
        np.testing.assert_allclose(result.gaussian.mean, [0.0], atol=1e-15)
        np.testing.assert_allclose(result.gaussian.cov, [[0.5]], atol=1e-15)
        # Z = integral of N(x; 0, 1) exp(-x^2 / 2) = 1 / sqrt(2)
        self.assertAlmostEqual(result.log_normalizer, -0.5 * np.log(2.0), places=14)

    def test_matches_quadrature(self):
        base = Gaussian([0.3], [[1.5]])
        f = ConsistencyFunction.toward([1.0], scale=0.4)
        beta = 2.0
        result = tilted_distribution(base, f, beta)

        def weight(x):
            return stats.norm.pdf(x, 0.3, np.sqrt(1.5)) * np.exp(f(np.array([x]))[0] / beta)

        Z, _ = integrate.quad(weight, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
        mean, _ = integrate.quad(lambda x: x * weight(x) / Z, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
        second, _ = integrate.quad(lambda x: x * x * weight(x) / Z, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-13)
        self.assertAlmostEqual(result.log_normalizer, np.log(Z), delta=1e-6)
        self.assertAlmostEqual(result.gaussian.mean[0], mean, delta=1e-6)
        self.assertAlmostEqual(result.gaussian.cov[0, 0], second - mean ** 2, delta=1e-6)

    def test_kl_at_optimum(self):
        f = ConsistencyFunction.toward([1.0, 0.5], scale=0.7)
        beta = 1.3
        result = tilted_distribution(self.base, f, beta)
        kl = gaussian_kl(result.gaussian.mean, result.gaussian.cov, self.base.mean, self.base.cov)
        self.assertAlmostEqual(kl, result.kl_to_base(beta), delta=1e-8)
        objective = result.expected_consistency - beta * kl
        self.assertAlmostEqual(objective, beta * result.log_normalizer, delta=1e-8)

    def test_tilt_destroying_definiteness_rejected(self):
        with self.assertRaises(OracleError):
            tilted_distribution(Gaussian([0.0], [[1.0]]), ConsistencyFunction([[5.0]], [0.0]), 1.0)


class AffineOracleTests(SimpleTestCase):
    def test_residual_moments_match_sampling(self):
        rng = np.random.default_rng(8)
        A, b, x, t = rng.normal(size=(2, 2)), rng.normal(size=2), rng.normal(size=2), 0.35
        mean, cov = residual_moments(A, b, x, t, SCHED)
        eps = rng.standard_normal((200_000, 2))
        residual = (SCHED.alpha(t) * x + SCHED.sigma(t) * eps) @ A.T + b - eps
        np.testing.assert_allclose(residual.mean(axis=0), mean, atol=0.02)
        np.testing.assert_allclose(np.cov(residual.T), cov, atol=0.1)
        self.assertAlmostEqual(expected_eps_error(A, b, x, t, SCHED), float(mean @ mean + np.trace(cov)))

    def test_rate_is_positive(self):
        self.assertGreater(kl_rate(np.eye(2), np.ones(2), np.zeros(2), 0.5, SCHED), 0.0)

    def test_deviation_vanishes_for_identical_models(self):
        model = linear_model(1)
        self.assertEqual(affine_deviation(model, model, [0.3, -0.4], 'dog', SCHED, grid_size=16), 0.0)

    def test_deviation_is_antisymmetric(self):
        theta, phi = linear_model(1), linear_model(2)
        forward = affine_deviation(theta, phi, [0.3, -0.4], 'dog', SCHED, grid_size=16)
        backward = affine_deviation(phi, theta, [0.3, -0.4], 'dog', SCHED, grid_size=16)
        self.assertAlmostEqual(forward, -backward, places=12)

    def test_step_kl_converges_to_rate(self):
        rng = np.random.default_rng(3)
        x, eps, eps_hat = rng.normal(size=(3, 2))
        t = 0.5
        limit = -0.5 * SCHED.d_log_snr(t) * np.sum((eps_hat - eps) ** 2)
        h = 1e-4
        self.assertAlmostEqual(denoising_step_kl(x, eps, eps_hat, t, t - h, SCHED) / h, limit, delta=1e-3 * limit)

    def test_step_kl_zero_for_exact_prediction(self):
        eps = np.array([0.2, -0.1])
        self.assertAlmostEqual(denoising_step_kl([1.0, 0.0], eps, eps, 0.6, 0.5, SCHED), 0.0, places=12)


class MetricTests(SimpleTestCase):
    def test_samples_on_references_score_one(self):
        refs = np.array([[0.0, 0.0], [1.0, 2.0], [-1.0, 0.5]])
        self.assertEqual(consistency_score(refs, refs), 1.0)

    def test_far_samples_score_zero(self):
        refs = np.array([[0.0, 0.0], [1.0, 0.0]])
        self.assertLess(consistency_score(np.array([[1e3, 1e3]]), refs), 1e-12)

    def test_brute_force(self):
        refs = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
        samples = np.array([[0.5, 0.5], [3.0, -1.0]])
        pairwise = sorted(np.sum((a - b) ** 2) for i, a in enumerate(refs) for b in refs[i + 1:])
        bandwidth = pairwise[len(pairwise) // 2]
        expected = np.mean([
            np.exp(-min(np.sum((s - r) ** 2) for r in refs) / bandwidth) for s in samples
        ])
        self.assertAlmostEqual(reference_bandwidth(refs), bandwidth)
        self.assertAlmostEqual(consistency_score(samples, refs), expected, places=14)

    def test_empty_inputs_rejected(self):
        with self.assertRaises(OracleError):
            consistency_score(np.zeros((0, 2)), np.zeros((1, 2)))

    def test_single_vector_is_one_point(self):
        refs = np.array([[0.0, 0.0], [1.0, 2.0]])
        self.assertEqual(consistency_score(np.array([1.0, 2.0]), refs), consistency_score(np.array([[1.0, 2.0]]), refs))
        world = plane_world()
        self.assertEqual(prompt_fidelity(np.array([0.5, 1.5]), 'sks', world),
                         prompt_fidelity(np.array([[0.5, 1.5]]), 'sks', world))

    def test_ambiguous_vectors_rejected(self):
        with self.assertRaises(OracleError):
            prompt_fidelity(np.array([0.5, 1.5, 2.0]), 'sks', plane_world())
        with self.assertRaises(OracleError):
            consistency_score(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_one_dimensional_samples_stay_rows(self):
        refs = np.array([0.0, 1.0, 3.0])
        self.assertEqual(consistency_score(refs, refs), 1.0)

    def test_fidelity_maximal_at_mean(self):
        world = plane_world()
        self.assertAlmostEqual(prompt_fidelity(np.array([[0.5, 1.5]] * 3), 'sks', world), 1.0, places=12)

    def test_matched_prompt_scores_higher(self):
        world = plane_world()
        rng = np.random.default_rng(21)
        matched = world.sample('cat', 1000, rng)
        mismatched = world.sample('dog', 1000, rng)
        self.assertGreater(prompt_fidelity(matched, 'cat', world), prompt_fidelity(mismatched, 'cat', world))

    def test_unknown_condition(self):
        with self.assertRaises(WorldError):
            prompt_fidelity(np.zeros((1, 2)), 'horse', plane_world())
