import json
import logging
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from autodiff.exceptions import LabError
from dcolab.conf import lab_setting
from harness.exceptions import ConfigError
from harness.experiments import ExperimentRunner, load_experiment_config
from harness.reports import pareto_report, read_pareto_csv, write_pareto_csv

logger = logging.getLogger(__name__)

SUBCOMMANDS = ('train-base', 'finetune', 'sample', 'sweep', 'merge', 'diagnose', 'report')


class Command(BaseCommand):
    help = "Run dcolab experiments: train-base, finetune, sample, sweep, merge, diagnose, report."

    def add_arguments(self, parser):
        parser.add_argument('subcommand', choices=SUBCOMMANDS)
        parser.add_argument('--config', help="Experiment YAML file.")
        parser.add_argument('--out', help="Output directory (default: OUTPUT_ROOT/<config name>).")
        parser.add_argument('--seed', type=int, help="Run every fine-tune block with this single seed.")
        parser.add_argument('--workers', type=int, help="Concurrent runs.")
        parser.add_argument('--omega-con', dest='omega_con', type=float, nargs='+', help="Consistency scales to sweep.")
        parser.add_argument('--beta', type=float, help="DCO beta for every fine-tune block.")
        parser.add_argument('--objective', choices=('dm', 'dm-prior', 'dco'), help="Objective for every block.")
        parser.add_argument('--adapter', help="diagnose: profile this adapter file instead of the configured runs.")

    def handle(self, *args, **options):
        subcommand = options['subcommand']
        out = self._output_dir(options)
        try:
            if subcommand == 'report':
                self.report(out)
                return
            config = load_experiment_config(
                options['config'] or self._missing_config(),
                objective=options['objective'],
                beta=options['beta'],
                seed=options['seed'],
                omega_con=options['omega_con'],
            )
            runner = ExperimentRunner(config, out=out, workers=options['workers'])
            out = runner.out
            getattr(self, subcommand.replace('-', '_'))(runner, options)
        except LabError as exc:
            self._fail(exc, subcommand, out)

    def _output_dir(self, options):
        if options['out']:
            return Path(options['out'])
        if options['config']:
            return Path(lab_setting('OUTPUT_ROOT')) / Path(options['config']).stem
        return None

    def _missing_config(self):
        raise ConfigError("--config is required")

    def _fail(self, exc, subcommand, out):
        record = {
            'error': type(exc).__name__,
            'message': str(exc),
            'line': getattr(exc, 'line', None),
            'subcommand': subcommand,
        }
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / 'error.json').write_text(json.dumps(record, indent=2, sort_keys=True))
        logger.error("%s failed: %s", subcommand, exc)
        raise CommandError(f"{record['error']}: {record['message']}", returncode=2 if isinstance(exc, ConfigError) else 1)

    def train_base(self, runner, options):
        """Pretrain the base model and write base.dcl"""
        path = runner.train_base()
        self.stdout.write(self.style.SUCCESS(f"base model: {path}"))

    def finetune(self, runner, options):
        """Fine-tune every configured block and seed"""
        runs = runner.finetune_all()
        for key in sorted(runs):
            self.stdout.write(f"{key[0]} seed {key[1]}: {runs[key].directory}")
        self.stdout.write(self.style.SUCCESS(f"{len(runs)} runs"))

    def sample(self, runner, options):
        """Dump consistency-guided samples for every run"""
        paths = runner.sample_all()
        self.stdout.write(self.style.SUCCESS(f"{len(paths)} sample files under {runner.out / 'samples'}"))

    def sweep(self, runner, options):
        """Score every run at each consistency scale"""
        points = runner.sweep()
        path = write_pareto_csv(runner.out / 'sweep' / 'pareto.csv', points)
        self.stdout.write(self.style.SUCCESS(f"{len(points)} points: {path}"))

    def merge(self, runner, options):
        """Merge subject and style adapters and evaluate them"""
        rows = runner.merge_all()
        for row in rows:
            self.stdout.write(
                f"{row['name']} seed {row['seed']}: subject {row['subject_consistency']:.4f} "
                f"style {row['style_consistency']:.4f} prompt {row['prompt_fidelity']:.4f}"
            )
        self.stdout.write(self.style.SUCCESS(f"merge report: {runner.out / 'merge' / 'merge_report.csv'}"))

    def diagnose(self, runner, options):
        """Noise-distance profiles of the fine-tuned runs, or of one adapter file"""
        rows = [runner.diagnose_adapter(options['adapter'])] if options['adapter'] else runner.diagnose()
        for row in rows:
            self.stdout.write(f"{row['label']}: mean noise distance {row['mean_distance']:.6g}")
        self.stdout.write(self.style.SUCCESS(f"diagnostics under {runner.out / 'diagnostics'}"))

    def report(self, out):
        """Pareto report from a finished sweep"""
        if out is None:
            raise ConfigError("report needs --out or --config")
        points = read_pareto_csv(out / 'sweep' / 'pareto.csv')
        summary = pareto_report(points, out / 'report')
        for (first, second), entry in sorted(summary.items()):
            self.stdout.write(
                f"{first} over {second}: {entry['fraction']:.3f} [{entry['ci_low']:.3f}, {entry['ci_high']:.3f}]"
            )
        self.stdout.write(self.style.SUCCESS(f"report under {out / 'report'}"))
