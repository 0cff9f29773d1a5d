import io
import json
import tempfile
from itertools import permutations
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag

from adapters.lora import LoraAdapter, TokenEmbedding, attach, save_adapter
from diffusion.checkpoints import save_model
from diffusion.networks import EpsModel, ModelSpec
from diffusion.schedules import CosineSchedule
from oracle.worlds import GaussianComponent, GaussianConceptWorld
from sampling.guidance import GuidanceConfig
from sampling.samplers import SamplerConfig

from .exceptions import ArtifactError, ConfigError, ReportError
from .experiments import (
    AdapterBundle,
    ExperimentRunner,
    evaluate_model,
    load_experiment_config,
    my_subject_my_style,
)
from .reports import (
    ParetoPoint,
    bootstrap_interval,
    dominance_fraction,
    dominates,
    guidance_trend,
    pareto_frontier,
    pareto_report,
    read_pareto_csv,
    write_pareto_csv,
)

SCHED = CosineSchedule()

WORLD_YAML = """\
seed: 0
conditions:
  dog:
    components:
      - mean: [1.0, 1.0]
        cov: [[0.3, 0.0], [0.0, 0.3]]
  cat:
    components:
      - mean: [-1.0, 1.0]
        cov: [[0.3, 0.0], [0.0, 0.3]]
  my_dog:
    pretrain: false
    components:
      - mean: [1.5, 1.3]
        cov: [[0.02, 0.0], [0.0, 0.02]]
"""

TREND_WORLD_YAML = WORLD_YAML.replace("mean: [1.5, 1.3]", "mean: [1.8, 1.5]")


def point(method, omega, consistency, fidelity, seed=0, guidance='consistency'):
    return ParetoPoint(method, omega, consistency, fidelity, seed, guidance=guidance)


def small_base(seed=0):
    model = EpsModel.initialize(ModelSpec(data_dim=2, hidden=(8,)), ['dog', 'cat'], seed=seed)
    rng = np.random.default_rng(seed + 1)
    model.weights[-1].assign(rng.normal(0.0, 0.4, size=model.weights[-1].shape))
    return model.freeze()


def small_world():
    return GaussianConceptWorld({
        'dog': [GaussianComponent(1.0, [1.0, 1.0], 0.3 * np.eye(2))],
        'cat': [GaussianComponent(1.0, [-1.0, 1.0], 0.3 * np.eye(2))],
    })


def random_adapter(base, seed, rank=2):
    adapter = LoraAdapter.initialize(base, rank, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for _, B in adapter.layers.values():
        B.assign(rng.normal(0.0, 0.3, size=B.shape))
    return adapter


class Workspace:
    """A temporary directory holding a world file, a base checkpoint and config files."""

    def __init__(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        (self.root / 'world.yaml').write_text(WORLD_YAML)
        self.base = small_base()
        save_model(self.base, self.root / 'base.dcl')

    def config(self, text, name='experiment.yaml'):
        path = self.root / name
        path.write_text(text)
        return path

    def cleanup(self):
        self._tmp.cleanup()


class ParetoTests(SimpleTestCase):
    def test_dominates_needs_a_strict_improvement(self):
        self.assertTrue(dominates(point('a', 2.0, 0.6, 0.6), point('b', 2.0, 0.5, 0.6)))
        self.assertFalse(dominates(point('a', 2.0, 0.5, 0.6), point('b', 3.0, 0.5, 0.6)))
        self.assertFalse(dominates(point('a', 2.0, 0.7, 0.3), point('b', 2.0, 0.5, 0.6)))

    def test_pointwise_better_method_dominates_fully(self):
        better = [point('a', 2.0, 0.6, 0.6), point('a', 3.0, 0.8, 0.4)]
        worse = [point('b', 2.0, 0.5, 0.5), point('b', 3.0, 0.7, 0.3)]
        self.assertEqual(dominance_fraction(better, worse), 1.0)
        self.assertEqual(dominance_fraction(worse, better), 0.0)

    def test_identical_sets_tie_at_one_half(self):
        first = [point('a', 2.0, 0.6, 0.6), point('a', 3.0, 0.8, 0.4)]
        second = [point('b', p.omega_con, p.consistency, p.prompt_fidelity) for p in first]
        self.assertEqual(dominance_fraction(first, second), 0.5)
        self.assertEqual(dominance_fraction(second, first), 0.5)

    def test_no_comparable_pair_counts_one_half(self):
        first = [point('a', 2.0, 0.9, 0.1), point('a', 3.0, 0.95, 0.05)]
        second = [point('b', 2.0, 0.1, 0.9), point('b', 3.0, 0.05, 0.95)]
        self.assertEqual(dominance_fraction(first, second), 0.5)

    def test_fractions_are_averaged_over_shared_seeds(self):
        first = [point('a', 2.0, 0.6, 0.6, seed=0), point('a', 2.0, 0.1, 0.1, seed=1), point('a', 2.0, 0.9, 0.9, seed=9)]
        second = [point('b', 2.0, 0.5, 0.5, seed=0), point('b', 2.0, 0.2, 0.2, seed=1)]
        self.assertEqual(dominance_fraction(first, second), 0.5)

    def test_methods_without_shared_seeds_are_rejected(self):
        with self.assertRaises(ReportError):
            dominance_fraction([point('a', 2.0, 0.5, 0.5, seed=0)], [point('b', 2.0, 0.5, 0.5, seed=1)])

    def test_frontier_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            points = [point('a', float(w), *rng.integers(0, 4, size=2) / 4.0) for w in range(4)]
            expected = {
                p for p in points
                if not any(q.consistency >= p.consistency and q.prompt_fidelity >= p.prompt_fidelity
                           and (q.consistency, q.prompt_fidelity) != (p.consistency, p.prompt_fidelity)
                           for q in points)
            }
            self.assertEqual(set(pareto_frontier(points)), expected)

    def test_frontier_ignores_input_order(self):
        points = [point('a', 2.0, 0.3, 0.9), point('a', 3.0, 0.5, 0.5), point('a', 4.0, 0.4, 0.4),
                  point('a', 5.0, 0.8, 0.2)]
        frontiers = {tuple(pareto_frontier(order)) for order in permutations(points)}
        self.assertEqual(len(frontiers), 1)
        self.assertEqual(len(frontiers.pop()), 3)

    def test_non_finite_scores_are_rejected(self):
        with self.assertRaises(ReportError):
            point('a', 2.0, float('nan'), 0.5)

    def test_bootstrap_interval_of_constant_values(self):
        self.assertEqual(bootstrap_interval([0.75] * 5), (0.75, 0.75))

    def test_bootstrap_interval_brackets_the_mean(self):
        values = [0.2, 0.4, 0.6, 0.8, 1.0]
        low, high = bootstrap_interval(values)
        self.assertLessEqual(low, np.mean(values))
        self.assertGreaterEqual(high, np.mean(values))
        self.assertEqual((low, high), bootstrap_interval(values))

    def test_guidance_trend_signs(self):
        points = [point('a', w, 0.1 * w, 1.0 - 0.1 * w) for w in (2.0, 3.0, 4.0, 5.0)]
        points.append(point('a', None, 0.9, 0.9, guidance='cfg'))
        [row] = guidance_trend(points)
        self.assertAlmostEqual(row['rho_consistency'], 1.0)
        self.assertAlmostEqual(row['rho_fidelity'], -1.0)
        self.assertFalse(row['degenerate'])

    def test_constant_scores_mark_the_trend_degenerate(self):
        points = [point('a', w, 0.0, 1.0 - 0.1 * w) for w in (2.0, 3.0, 4.0, 5.0)]
        with self.assertLogs('harness.reports', 'WARNING'):
            [row] = guidance_trend(points)
        self.assertIsNone(row['rho_consistency'])
        self.assertAlmostEqual(row['rho_fidelity'], -1.0)
        self.assertTrue(row['degenerate'])

    def test_degenerate_trend_is_written_without_a_correlation(self):
        points = []
        for method in ('a', 'b'):
            points += [point(method, w, 0.5, 0.5) for w in (2.0, 3.0)]
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertLogs('harness.reports', 'WARNING'):
                pareto_report(points, tmp)
            lines = (Path(tmp) / 'trend.csv').read_text().splitlines()
        self.assertEqual(lines, ['method,seed,rho_consistency,rho_fidelity,degenerate', 'a,0,,,True', 'b,0,,,True'])


class ParetoReportTests(SimpleTestCase):
    def points(self):
        points = []
        for seed in (0, 1, 2):
            for w in (2.0, 3.0, 4.0):
                points.append(point('dco', w, 0.5 + 0.1 * w, 0.9 - 0.05 * w, seed=seed))
                points.append(point('dm', w, 0.4 + 0.1 * w, 0.8 - 0.05 * w, seed=seed))
            points.append(point('dco', None, 0.3, 0.9, seed=seed, guidance='cfg'))
        return points

    def test_csv_round_trip(self):
        points = self.points()
        with tempfile.TemporaryDirectory() as tmp:
            path = write_pareto_csv(Path(tmp) / 'pareto.csv', points)
            self.assertEqual(read_pareto_csv(path), points)

    def test_reading_a_foreign_file_fails(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'other.csv'
            path.write_text('a,b\n1,2\n')
            with self.assertRaises(ArtifactError):
                read_pareto_csv(path)
            with self.assertRaises(ArtifactError):
                read_pareto_csv(Path(tmp) / 'missing.csv')

    def test_report_summary_and_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            summary = pareto_report(self.points(), tmp)
            names = sorted(p.name for p in Path(tmp).iterdir())
            dominance = (Path(tmp) / 'dominance.csv').read_text().splitlines()
        self.assertEqual(names, ['dominance.csv', 'frontier.csv', 'pareto.csv', 'pareto.svg', 'trend.csv'])
        self.assertEqual(summary[('dco', 'dm')]['fraction'], 1.0)
        self.assertEqual(summary[('dm', 'dco')]['fraction'], 0.0)
        self.assertEqual(dominance[0], 'method,other,fraction,ci_low,ci_high,seeds')
        self.assertEqual(dominance[1], 'dco,dm,1.0,1.0,1.0,3')

    def test_report_is_regenerated_bit_identically(self):
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            pareto_report(self.points(), first)
            pareto_report(self.points(), second)
            for name in ('pareto.csv', 'frontier.csv', 'dominance.csv', 'trend.csv', 'pareto.svg'):
                self.assertEqual((Path(first) / name).read_bytes(), (Path(second) / name).read_bytes(), name)

    def test_plain_cfg_points_are_drawn_as_diamonds(self):
        with tempfile.TemporaryDirectory() as tmp:
            pareto_report(self.points(), tmp)
            svg = (Path(tmp) / 'pareto.svg').read_text()
        self.assertIn('dco (plain CFG)', svg)

    def test_degenerate_inputs_are_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ReportError):
                pareto_report([point('dco', 2.0, 0.5, 0.5), point('dco', 3.0, 0.6, 0.4)], tmp)
            with self.assertRaises(ReportError):
                pareto_report([point('dco', 2.0, 0.5, 0.5), point('dco', 3.0, 0.6, 0.4),
                               point('dm', 2.0, 0.5, 0.5)], tmp)


class ConfigTests(SimpleTestCase):
    def setUp(self):
        self.workspace = Workspace()

    def tearDown(self):
        self.workspace.cleanup()

    def load(self, text, **overrides):
        return load_experiment_config(self.workspace.config(text), **overrides)

    def test_valid_config_with_defaults(self):
        config = self.load(
            "world: world.yaml\n"
            "finetune:\n"
            "  - label: dco\n"
            "    objective: dco\n"
            "    concept: my_dog\n"
            "    token: sks\n"
            "    initializer: dog\n"
            "sweep:\n"
            "  samples: 16\n"
        )
        self.assertEqual(config.world.dim, 2)
        self.assertEqual(config.world_path, self.workspace.root / 'world.yaml')
        block = config.block('dco')
        self.assertEqual(block['seeds'], [0])
        self.assertEqual(block['beta'], 1000.0)
        self.assertEqual(config.sweep['omega_con'], [2.0, 3.0, 4.0, 5.0])
        self.assertEqual(config.base['steps'], 2000)
        with self.assertRaises(ConfigError):
            config.block('dm')

    def test_command_line_overrides(self):
        config = self.load(
            "world: world.yaml\n"
            "finetune:\n"
            "  - {label: a, objective: dco, concept: my_dog, token: sks, initializer: dog, seeds: [0, 1]}\n",
            objective='dm', beta=500.0, seed=7, omega_con=[1.0, 2.0],
        )
        block = config.block('a')
        self.assertEqual((block['objective'], block['beta'], block['seeds']), ('dm', 500.0, [7]))
        self.assertEqual(config.sweep['omega_con'], [1.0, 2.0])

    def test_unknown_concept_reports_its_line(self):
        with self.assertRaises(ConfigError) as caught:
            self.load(
                "world: world.yaml\n"
                "finetune:\n"
                "  - label: a\n"
                "    objective: dco\n"
                "    concept: horse\n"
            )
        self.assertEqual(caught.exception.line, 5)
        self.assertIn('horse', str(caught.exception))

    def test_bad_field_reports_its_line(self):
        with self.assertRaises(ConfigError) as caught:
            self.load(
                "world: world.yaml\n"
                "finetune:\n"
                "  - label: a\n"
                "    objective: ppo\n"
                "    concept: dog\n"
            )
        self.assertEqual(caught.exception.line, 4)
        self.assertIn('finetune.0.objective', str(caught.exception))

    def test_missing_world_file(self):
        with self.assertRaises(ConfigError) as caught:
            self.load("world: nowhere.yaml\n")
        self.assertEqual(caught.exception.line, 1)

    def test_yaml_syntax_error_has_a_line(self):
        with self.assertRaises(ConfigError) as caught:
            self.load("world: world.yaml\nfinetune: [\n  {label: a\n")
        self.assertIsNotNone(caught.exception.line)

    def test_cross_field_rules(self):
        bad = [
            # token without initializer
            "  - {label: a, objective: dco, concept: my_dog, token: sks}\n",
            # held-out concept without a token
            "  - {label: a, objective: dco, concept: my_dog}\n",
            # initializer must be a pretrain condition
            "  - {label: a, objective: dco, concept: my_dog, token: sks, initializer: my_dog}\n",
            # prior preservation needs a class
            "  - {label: a, objective: dm-prior, concept: dog}\n",
            "  - {label: a, objective: dco, concept: dog, steps: 10, early_stop_steps: 20}\n",
            "  - {label: a, objective: dco, concept: dog, seeds: [1, 1]}\n",
            "  - {label: a, objective: dco, concept: dog}\n  - {label: a, objective: dm, concept: dog}\n",
        ]
        for block in bad:
            with self.subTest(block=block), self.assertRaises(ConfigError):
                self.load("world: world.yaml\nfinetune:\n" + block)

    def test_merge_pairs_must_name_blocks(self):
        with self.assertRaises(ConfigError):
            self.load(
                "world: world.yaml\n"
                "finetune:\n"
                "  - {label: a, objective: dco, concept: dog}\n"
                "merge:\n"
                "  prompt: dog\n"
                "  pairs: [{name: m, subject: a, style: b}]\n"
            )


class MergeTests(SimpleTestCase):
    def setUp(self):
        self.base = small_base()
        self.world = small_world()
        token = TokenEmbedding('sks', self.base.condition_embedding('dog') + 0.1, initializer='dog')
        self.subject = AdapterBundle(random_adapter(self.base, 1), (token,), self.base.checksum())
        self.refs = np.array([[1.2, 1.1], [0.9, 1.4], [1.1, 0.8]])
        self.style_refs = np.array([[-0.5, 0.2], [-0.4, 0.1]])
        self.kwargs = dict(
            conditions=['sks'],
            world=self.world,
            prompt='dog',
            guidance=GuidanceConfig(omega_text=3.0, omega_con=2.0),
            sampler=SamplerConfig(steps=8, seed=4),
            n=32,
            sched=SCHED,
        )

    def test_zero_style_adapter_reproduces_subject_only_report(self):
        style = AdapterBundle(LoraAdapter.initialize(self.base, 2, seed=9))
        rows, _ = my_subject_my_style(
            self.base, self.subject, style, subject_refs=self.refs, style_refs=self.style_refs, **self.kwargs
        )
        subject_only = attach(self.base, self.subject.adapter, self.subject.tokens, train_embedding=False)
        expected = evaluate_model(
            subject_only, self.base, self.kwargs['conditions'], self.world, 'dog', self.refs, self.style_refs,
            self.kwargs['guidance'], self.kwargs['sampler'], self.kwargs['n'], SCHED,
        )
        self.assertEqual(rows, expected)

    def test_subject_as_style_gives_equal_columns(self):
        rows, model = my_subject_my_style(
            self.base, self.subject, self.subject, subject_refs=self.refs, style_refs=self.refs, **self.kwargs
        )
        self.assertEqual(rows[0]['subject_consistency'], rows[0]['style_consistency'])
        self.assertEqual(list(model.tokens), ['sks'])

    def test_merged_delta_is_the_weighted_sum(self):
        style = AdapterBundle(random_adapter(self.base, 2), (), self.base.checksum())
        _, model = my_subject_my_style(
            self.base, self.subject, style, subject_refs=self.refs, style_refs=self.style_refs,
            tau=(1.0, 0.5), **self.kwargs
        )
        for index in model.adapter.layers:
            expected = self.subject.adapter.delta(index) + 0.5 * style.adapter.delta(index)
            np.testing.assert_allclose(model.adapter.delta(index), expected, rtol=0, atol=1e-12)

    def test_base_mismatch_is_rejected(self):
        style = AdapterBundle(random_adapter(self.base, 2), (), 'not-this-base')
        with self.assertRaises(ArtifactError):
            my_subject_my_style(
                self.base, self.subject, style, subject_refs=self.refs, style_refs=self.style_refs, **self.kwargs
            )


class LabCommandTests(SimpleTestCase):
    def setUp(self):
        self.workspace = Workspace()
        self.out = self.workspace.root / 'out'

    def tearDown(self):
        self.workspace.cleanup()

    def run_lab(self, subcommand, *args, **options):
        call_command('lab', subcommand, *args, out=str(self.out), stdout=io.StringIO(), **options)

    def error_record(self):
        return json.loads((self.out / 'error.json').read_text())

    def test_malformed_config_writes_an_error_record(self):
        config = self.workspace.config("world: world.yaml\nfinetune:\n  - label: a\n    objective: ppo\n")
        with self.assertRaises(CommandError):
            self.run_lab('finetune', config=str(config))
        record = self.error_record()
        self.assertEqual(record['error'], 'ConfigError')
        self.assertEqual(record['line'], 4)
        self.assertEqual(record['subcommand'], 'finetune')

    def test_report_without_a_sweep_fails(self):
        with self.assertRaises(CommandError):
            self.run_lab('report')
        self.assertEqual(self.error_record()['error'], 'ArtifactError')

    def test_diagnose_identity_adapter_is_flat_zero(self):
        config = self.workspace.config(
            "world: world.yaml\n"
            "base: {checkpoint: base.dcl}\n"
            "finetune:\n"
            "  - {label: plain, objective: dco, concept: dog, reference_size: 3}\n"
        )
        adapter_path = self.workspace.root / 'identity.dcl'
        save_adapter(LoraAdapter.initialize(self.workspace.base, 4, seed=0), adapter_path,
                     base_checksum=self.workspace.base.checksum())
        self.run_lab('diagnose', config=str(config), adapter=str(adapter_path))
        lines = (self.out / 'diagnostics' / 'identity.csv').read_text().splitlines()
        self.assertEqual(lines[0], 't,mean_distance,stderr')
        self.assertEqual(len(lines), 65)
        for line in lines[1:]:
            _, distance, stderr = line.split(',')
            self.assertEqual((distance, stderr), ('0.0', '0.0'))

    def test_sweep_and_report_pipeline(self):
        config = self.workspace.config(
            "world: world.yaml\n"
            "base: {checkpoint: base.dcl}\n"
            "finetune:\n"
            "  - {label: dco, objective: dco, concept: my_dog, token: sks, initializer: dog,\n"
            "     steps: 3, adapter_lr: 0.005, reference_size: 2, seeds: [0, 1]}\n"
            "  - {label: dm, objective: dm, concept: my_dog, token: sks, initializer: dog,\n"
            "     steps: 3, adapter_lr: 0.005, reference_size: 2, seeds: [0, 1]}\n"
            "sweep: {omega_con: [2.0, 3.0], samples: 8, steps: 4, prompt: dog, clip_denoised: 5.0}\n"
        )
        self.run_lab('sweep', config=str(config))
        first = (self.out / 'sweep' / 'pareto.csv').read_bytes()
        points = read_pareto_csv(self.out / 'sweep' / 'pareto.csv')
        self.assertEqual(len(points), 2 * 2 * 3)
        self.assertEqual(sum(p.guidance == 'cfg' for p in points), 4)
        self.assertTrue((self.out / 'runs' / 'dco' / 'seed-1' / 'adapter.dcl').is_file())

        # the second sweep reuses the saved runs
        self.run_lab('sweep', config=str(config))
        self.assertEqual((self.out / 'sweep' / 'pareto.csv').read_bytes(), first)

        self.run_lab('report', config=str(config))
        for name in ('frontier.csv', 'dominance.csv', 'trend.csv', 'pareto.svg'):
            self.assertTrue((self.out / 'report' / name).is_file(), name)

    def test_command_line_seed_narrows_the_runs(self):
        config = self.workspace.config(
            "world: world.yaml\n"
            "base: {checkpoint: base.dcl}\n"
            "finetune:\n"
            "  - {label: dm, objective: dm, concept: dog, steps: 2, reference_size: 2, seeds: [0, 1, 2]}\n"
        )
        self.run_lab('finetune', config=str(config), seed=5)
        self.assertEqual([p.name for p in (self.out / 'runs' / 'dm').iterdir()], ['seed-5'])


@tag('slow')
class ParetoTrendTests(SimpleTestCase):
    """Consistency rises and prompt fidelity falls with omega_con on a trained toy base."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            (root / 'world.yaml').write_text(TREND_WORLD_YAML)
            block = ("  - {{label: {label}, objective: {objective}, concept: my_dog, token: sks, initializer: dog,\n"
                     "     steps: 300, adapter_lr: 0.005, embedding_lr: 0.005, seeds: [0, 1, 2, 3, 4]}}\n")
            (root / 'pareto.yaml').write_text(
                "world: world.yaml\n"
                "base: {steps: 800, hidden: [32, 32]}\n"
                "finetune:\n"
                + block.format(label='dco', objective='dco')
                + block.format(label='dm', objective='dm')
                + "sweep: {omega_text: 1.0, omega_con: [2.0, 3.0, 4.0, 5.0], samples: 256, prompt: dog,\n"
                  "        clip_denoised: 4.0}\n"
            )
            runner = ExperimentRunner(load_experiment_config(root / 'pareto.yaml'), out=root / 'out')
            cls.points = runner.sweep()
            cls.summary = pareto_report(cls.points, root / 'out' / 'report')
        cls.trend = guidance_trend(cls.points)

    def test_scores_are_not_degenerate(self):
        self.assertEqual(len(self.trend), 10)
        self.assertFalse(any(row['degenerate'] for row in self.trend))

    def test_consistency_increases_with_guidance(self):
        self.assertGreaterEqual(np.mean([row['rho_consistency'] for row in self.trend]), 0.8)

    def test_prompt_fidelity_decreases_with_guidance(self):
        self.assertLessEqual(np.mean([row['rho_fidelity'] for row in self.trend]), -0.8)

    def test_dominance_is_reported_with_an_interval(self):
        self.assertIn(('dco', 'dm'), self.summary)
        row = self.summary[('dco', 'dm')]
        self.assertLessEqual(row['ci_low'], row['fraction'])
        self.assertGreaterEqual(row['ci_high'], row['fraction'])
