"""
Config-driven experiment pipelines.

An ``ExperimentRunner`` owns one output directory laid out as::

    base.dcl                              pretrained (frozen) base model
    runs/<label>/seed-<seed>/             one fine-tuning run (config.yaml, losses.csv, adapter.dcl)
    samples/<label>/seed-<seed>/          sample dumps per consistency scale
    diagnostics/<label>/seed-<seed>.csv   noise-distance profile
    report/                               Pareto tables and plot
    merge/<name>/seed-<seed>/             merged adapters, merge_report.csv one level up

Runs whose directory already holds the same config are loaded instead of retrained.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from adapters.lora import (
    AdaptedEpsModel,
    LoraAdapter,
    MergeSpec,
    TokenEmbedding,
    attach,
    load_adapter,
    merge,
    save_adapter,
)
from dcolab.conf import lab_setting
from diffusion.checkpoints import load_container, load_model, save_model
from diffusion.networks import EpsModel, ModelSpec
from diffusion.process import ConditionedSample
from diffusion.schedules import NoiseSchedule, get_schedule
from objectives.losses import BetaMode, DcoConfig, PriorPreservationConfig
from oracle.metrics import consistency_score, prompt_fidelity
from oracle.worlds import GaussianConceptWorld
from sampling.guidance import ClassifierFreeGuidance, ConsistencyGuidance, GuidanceConfig, guided_predictor
from sampling.samplers import SamplerConfig, sample, write_sample_dump
from training.diagnostics import noise_distance_profile, write_deviation_report
from training.trainers import TrainConfig, finetune, pretrain_base, synthesize_prior_set

from .exceptions import ArtifactError, ConfigError
from .reports import ParetoPoint, write_rows
from .serializers import ExperimentSerializer

logger = logging.getLogger(__name__)


# -- config -------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    path: Path
    world_path: Path
    world: GaussianConceptWorld
    output: Optional[Path]
    workers: int
    base: Mapping
    finetune: Sequence[Mapping]
    sweep: Optional[Mapping] = None
    merge: Optional[Mapping] = None

    def block(self, label: str) -> Mapping:
        for block in self.finetune:
            if block['label'] == label:
                return block
        raise ConfigError(f"no fine-tune block labelled {label!r}")

    def output_dir(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        if self.output is not None:
            return self.output
        return Path(lab_setting('OUTPUT_ROOT')) / self.path.stem


def _first_error(errors, path=()) -> Tuple[tuple, str]:
    """Path to and text of the first message in a nested DRF error structure."""
    if isinstance(errors, Mapping):
        for key, value in errors.items():
            if value:
                inner = path if key == 'non_field_errors' else path + (key,)
                return _first_error(value, inner)
    elif isinstance(errors, (list, tuple)):
        for index, value in enumerate(errors):
            if isinstance(value, (Mapping, list, tuple)):
                if value:
                    return _first_error(value, path + (index,))
            else:
                return path, str(value)
    return path, str(errors)


def _node_line(node, path) -> Optional[int]:
    """1-based line of the YAML node at ``path``, or of its deepest existing ancestor."""
    if node is None:
        return None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(key)), None)
            if match is None:
                break
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    return node.start_mark.line + 1


def _apply_overrides(data: dict, objective=None, beta=None, seed=None, omega_con=None) -> dict:
    for block in data.get('finetune') or []:
        if not isinstance(block, dict):
            continue
        if objective is not None:
            block['objective'] = objective
        if beta is not None:
            block['beta'] = beta
        if seed is not None:
            block['seeds'] = [seed]
    if omega_con is not None:
        sweep = data.get('sweep') if isinstance(data.get('sweep'), dict) else {}
        data['sweep'] = {**sweep, 'omega_con': list(omega_con)}
    return data


def load_experiment_config(path, **overrides) -> ExperimentConfig:
    """Parse and validate an experiment YAML file; CLI overrides are applied before validation."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(f"{path}: {exc.problem}", line=mark.line + 1 if mark else None) from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: an experiment config is a mapping", line=1)

    serializer = ExperimentSerializer(data=_apply_overrides(data, **overrides), context={'root': path.parent})
    if not serializer.is_valid():
        location, message = _first_error(serializer.errors)
        where = '.'.join(str(part) for part in location) or 'config'
        raise ConfigError(f"{path}: {where}: {message}", line=_node_line(root, location), errors=serializer.errors)
    validated = serializer.validated_data
    output = validated['output']
    if output is not None:
        output = Path(output) if Path(output).is_absolute() else path.parent / output
    return ExperimentConfig(
        path=path,
        world_path=validated['world'],
        world=validated['world_model'],
        output=output,
        workers=validated['workers'],
        base=validated['base'],
        finetune=validated['finetune'],
        sweep=validated['sweep'],
        merge=validated['merge'],
    )


# -- runs ----------------------------------------------------------------------------

@dataclass(frozen=True)
class AdapterBundle:
    adapter: LoraAdapter
    tokens: Tuple[TokenEmbedding, ...] = ()
    base_checksum: Optional[str] = None


@dataclass
class TrainedRun:
    label: str
    seed: int
    block: Mapping
    model: AdaptedEpsModel
    ref_set: List[ConditionedSample]
    directory: Path
    base_checksum: str
    losses: List[float] = field(default_factory=list)

    @property
    def condition(self) -> str:
        return self.block['token'] or self.block['concept']

    @property
    def references(self) -> np.ndarray:
        return np.stack([s.x for s in self.ref_set])

    @property
    def bundle(self) -> AdapterBundle:
        return AdapterBundle(self.model.adapter, tuple(self.model.tokens.values()), self.base_checksum)


def load_bundle(path) -> AdapterBundle:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"missing adapter {path}")
    adapter, tokens = load_adapter(path)
    meta, _ = load_container(path, kind='adapter')
    return AdapterBundle(adapter, tuple(tokens), meta.get('base_checksum'))


def train_config(block: Mapping, seed: int, prior_set: Sequence[ConditionedSample] = ()) -> TrainConfig:
    return TrainConfig(
        objective=block['objective'],
        steps=block['steps'],
        batch_size=block['batch_size'],
        adapter_lr=block['adapter_lr'],
        embedding_lr=block['embedding_lr'],
        rank=block['rank'],
        dco=DcoConfig(beta=block['beta'], beta_mode=BetaMode(block['beta_mode']), beta_t=block['beta']),
        prior=PriorPreservationConfig(lambda_prior=block['lambda_prior'], prior_set=tuple(prior_set)),
        offset_noise=block['offset_noise'],
        seed=seed,
        token=block['token'],
        initializer=block['initializer'],
        train_embedding=block['train_embedding'],
        early_stop_steps=block['early_stop_steps'],
    )


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, out=None, workers: Optional[int] = None):
        self.config = config
        self.out = config.output_dir(out)
        self.workers = workers or config.workers
        self._base: Optional[EpsModel] = None
        self._lock = threading.Lock()

    @property
    def world(self) -> GaussianConceptWorld:
        return self.config.world

    @property
    def sched(self) -> NoiseSchedule:
        return get_schedule(self.config.base['schedule'])

    # base -------------------------------------------------------------------

    def train_base(self) -> Path:
        settings = self.config.base
        spec = ModelSpec(
            data_dim=self.world.dim,
            hidden=tuple(settings['hidden']),
            architecture=settings['architecture'],
            embed_dim=lab_setting('EMBED_DIM'),
        )
        model = pretrain_base(
            self.world, spec, settings['steps'], seed=settings['seed'], sched=self.sched,
            lr=settings['lr'], batch_size=settings['batch_size'], condition_dropout=settings['condition_dropout'],
        )
        path = self.out / 'base.dcl'
        save_model(model, path)
        self._base = model
        logger.info("saved base model to %s", path)
        return path

    def base_model(self) -> EpsModel:
        with self._lock:
            if self._base is None:
                checkpoint = self.config.base.get('checkpoint')
                path = checkpoint or self.out / 'base.dcl'
                if path.is_file():
                    self._base = load_model(path).freeze()
                else:
                    self.train_base()
            return self._base

    # fine-tuning ------------------------------------------------------------

    def reference_set(self, block: Mapping) -> List[ConditionedSample]:
        rng = np.random.default_rng(block['reference_seed'])
        label = block['token'] or block['concept']
        return self.world.conditioned_samples(block['concept'], block['reference_size'], rng, label=label)

    def run_dir(self, label: str, seed: int) -> Path:
        return self.out / 'runs' / label / f'seed-{seed}'

    def _cached_run(self, directory: Path, cfg: TrainConfig, checksum: str) -> Optional[AdapterBundle]:
        try:
            snapshot = yaml.safe_load((directory / 'config.yaml').read_text())
        except (OSError, yaml.YAMLError):
            return None
        if snapshot != {'run': cfg.snapshot(), 'base_checksum': checksum}:
            return None
        return load_bundle(directory / 'adapter.dcl')

    def finetune_run(self, block: Mapping, seed: int) -> TrainedRun:
        base = self.base_model()
        ref_set = self.reference_set(block)
        prior_set = ()
        if block['objective'] == 'dm-prior':
            prior_set = synthesize_prior_set(base, block['initializer'], block['prior_size'], seed=seed, sched=self.sched)
        cfg = train_config(block, seed, prior_set)
        directory = self.run_dir(block['label'], seed)
        checksum = base.checksum()
        cached = self._cached_run(directory, cfg, checksum)
        if cached is not None:
            logger.info("reusing run %s", directory)
            model = attach(base, cached.adapter, cached.tokens, train_embedding=block['train_embedding'])
            return TrainedRun(block['label'], seed, block, model, ref_set, directory, checksum)
        record = finetune(base, ref_set, cfg, self.sched)
        record.save(directory)
        return TrainedRun(block['label'], seed, block, record.model, ref_set, directory, checksum, record.losses)

    def _map(self, fn, jobs):
        if self.workers <= 1 or len(jobs) <= 1:
            return [fn(*job) for job in jobs]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda job: fn(*job), jobs))

    def finetune_all(self, labels: Optional[Sequence[str]] = None) -> Dict[Tuple[str, int], TrainedRun]:
        self.base_model()
        blocks = [b for b in self.config.finetune if labels is None or b['label'] in labels]
        if not blocks:
            raise ConfigError("the config has no fine-tune blocks to run")
        jobs = [(block, seed) for block in blocks for seed in block['seeds']]
        runs = self._map(self.finetune_run, jobs)
        return {(run.label, run.seed): run for run in runs}

    # sampling and sweeps -----------------------------------------------------

    def _sweep_settings(self) -> Mapping:
        if self.config.sweep is None:
            raise ConfigError(f"{self.config.path}: no 'sweep' section")
        return self.config.sweep

    def _sampler(self, seed: int, steps: int) -> SamplerConfig:
        sweep = self.config.sweep or {}
        return SamplerConfig(
            steps=steps, seed=seed,
            t_max=sweep.get('t_max', lab_setting('SAMPLER_T_MAX')),
            clip_denoised=sweep.get('clip_denoised'),
        )

    def pareto_points(self, run: TrainedRun) -> List[ParetoPoint]:
        """Consistency-guided points at every omega_con plus one plain-CFG point.

        All scales share the sampler seed of the run.
        """
        sweep = self._sweep_settings()
        base = self.base_model()
        prompt = sweep['prompt'] or run.block['initializer']
        sampler = self._sampler(run.seed, sweep['steps'])
        points = []
        for omega_con in sweep['omega_con']:
            guidance = GuidanceConfig(omega_text=sweep['omega_text'], omega_con=omega_con)
            x = sample(guided_predictor(run.model, base, run.condition, guidance), self.sched, sampler,
                       sweep['samples'], self.world.dim)
            points.append(ParetoPoint(run.label, omega_con, consistency_score(x, run.references),
                                      prompt_fidelity(x, prompt, self.world), run.seed))
        if sweep['plain_cfg']:
            x = sample(ClassifierFreeGuidance(run.model, run.condition, sweep['omega_text']), self.sched, sampler,
                       sweep['samples'], self.world.dim)
            points.append(ParetoPoint(run.label, None, consistency_score(x, run.references),
                                      prompt_fidelity(x, prompt, self.world), run.seed, guidance='cfg'))
        return points

    def sweep(self) -> List[ParetoPoint]:
        runs = self.finetune_all()
        per_run = self._map(self.pareto_points, [(run,) for _, run in sorted(runs.items())])
        return [point for points in per_run for point in points]

    def write_samples(self, run: TrainedRun) -> List[Path]:
        sweep = self._sweep_settings()
        base = self.base_model()
        sampler = self._sampler(run.seed, sweep['steps'])
        paths = []
        for omega_con in sweep['omega_con']:
            guidance = GuidanceConfig(omega_text=sweep['omega_text'], omega_con=omega_con)
            x = sample(guided_predictor(run.model, base, run.condition, guidance), self.sched, sampler,
                       sweep['samples'], self.world.dim)
            rows = [{'seed': run.seed, 'condition': run.condition, 'omega_text': sweep['omega_text'],
                     'omega_con': omega_con, 'x': row} for row in x]
            path = self.out / 'samples' / run.label / f'seed-{run.seed}' / f'omega-con-{omega_con:g}.csv'
            paths.append(write_sample_dump(path, rows, self.world.dim))
        return paths

    def sample_all(self) -> List[Path]:
        runs = self.finetune_all()
        per_run = self._map(self.write_samples, [(run,) for _, run in sorted(runs.items())])
        return [path for paths in per_run for path in paths]

    # diagnostics --------------------------------------------------------------

    def diagnose(self, runs: Optional[Sequence[TrainedRun]] = None) -> List[dict]:
        runs = sorted(self.finetune_all().values(), key=lambda r: (r.label, r.seed)) if runs is None else runs
        base = self.base_model()
        rows = []
        for run in runs:
            report = noise_distance_profile(run.model, base, run.ref_set, seed=run.seed, sched=self.sched)
            write_deviation_report(self.out / 'diagnostics' / run.label / f'seed-{run.seed}.csv', report)
            rows.append({'label': run.label, 'seed': run.seed, 'mean_distance': report.overall})
        write_rows(self.out / 'diagnostics' / 'summary.csv', ('label', 'seed', 'mean_distance'), rows)
        return rows

    def diagnose_adapter(self, path) -> dict:
        """Noise-distance profile of a single adapter file against the base, on every block's reference set."""
        bundle = load_bundle(path)
        base = self.base_model()
        model = attach(base, bundle.adapter, bundle.tokens)
        ref_set = []
        for block in self.config.finetune:
            if (block['token'] or block['concept']) in model.condition_names:
                ref_set.extend(self.reference_set(block))
        if not ref_set:
            raise ArtifactError(f"{path} knows none of the configured reference conditions")
        report = noise_distance_profile(model, base, ref_set, sched=self.sched)
        write_deviation_report(self.out / 'diagnostics' / f'{Path(path).stem}.csv', report)
        return {'label': Path(path).stem, 'mean_distance': report.overall}

    # merging ------------------------------------------------------------------

    def merge_all(self) -> List[dict]:
        settings = self.config.merge
        if settings is None:
            raise ConfigError(f"{self.config.path}: no 'merge' section")
        labels = {name for pair in settings['pairs'] for name in (pair['subject'], pair['style'])}
        runs = self.finetune_all(sorted(labels))
        base = self.base_model()
        guidance = GuidanceConfig(omega_text=settings['omega_text'], omega_con=settings['omega_con'])
        rows = []
        for pair in settings['pairs']:
            subject_block = self.config.block(pair['subject'])
            style_block = self.config.block(pair['style'])
            for subject_seed, style_seed in zip(subject_block['seeds'], style_block['seeds']):
                subject = runs[(pair['subject'], subject_seed)]
                style = runs[(pair['style'], style_seed)]
                report, merged = my_subject_my_style(
                    base, subject.bundle, style.bundle,
                    conditions=[subject.condition],
                    world=self.world,
                    prompt=settings['prompt'],
                    subject_refs=subject.references,
                    style_refs=style.references,
                    tau=tuple(settings['tau']),
                    guidance=guidance,
                    sampler=SamplerConfig(steps=settings['steps'], seed=subject_seed),
                    n=settings['samples'],
                    sched=self.sched,
                )
                directory = self.out / 'merge' / pair['name'] / f'seed-{subject_seed}'
                save_adapter(merged.adapter, directory / 'adapter.dcl', merged.tokens, base_checksum=base.checksum())
                rows.extend({'name': pair['name'], 'seed': subject_seed, **row} for row in report)
        write_rows(self.out / 'merge' / 'merge_report.csv', MERGE_COLUMNS, rows)
        return rows


MERGE_COLUMNS = ('name', 'seed', 'condition', 'subject_consistency', 'style_consistency', 'prompt_fidelity')


def evaluate_model(model, base, conditions, world, prompt, subject_refs, style_refs, guidance, sampler, n, sched):
    """Subject consistency, style consistency and prompt fidelity of consistency-guided samples per condition."""
    rows = []
    for condition in conditions:
        x = sample(ConsistencyGuidance(model, base, condition, guidance), sched, sampler, n, base.data_dim)
        rows.append({
            'condition': condition,
            'subject_consistency': consistency_score(x, subject_refs),
            'style_consistency': consistency_score(x, style_refs),
            'prompt_fidelity': prompt_fidelity(x, prompt, world),
        })
    return rows


def my_subject_my_style(
    base: EpsModel,
    subject: AdapterBundle,
    style: AdapterBundle,
    conditions: Sequence[str],
    world: GaussianConceptWorld,
    prompt: str,
    subject_refs,
    style_refs,
    tau: Tuple[float, float] = (1.0, 1.0),
    guidance: Optional[GuidanceConfig] = None,
    sampler: Optional[SamplerConfig] = None,
    n: int = 256,
    sched: Optional[NoiseSchedule] = None,
) -> Tuple[List[dict], AdaptedEpsModel]:
    """Merge a subject and a style adapter by tau_1 dW_subject + tau_2 dW_style and evaluate the result.

    Scores are surrogates: consistency against each reference set and the
    world density of ``prompt``.
    """
    checksum = base.checksum()
    for bundle in (subject, style):
        if bundle.base_checksum is not None and bundle.base_checksum != checksum:
            raise ArtifactError("adapters were trained against a different base model")
    tokens = {}
    for token in (*subject.tokens, *style.tokens):
        known = tokens.get(token.token)
        if known is not None and not np.array_equal(known.vector.values, token.vector.values):
            raise ArtifactError(f"subject and style disagree on token {token.token!r}")
        tokens.setdefault(token.token, token)
    merged = merge(MergeSpec(((subject.adapter, tau[0]), (style.adapter, tau[1]))))
    model = attach(base, merged, list(tokens.values()), train_embedding=False)
    rows = evaluate_model(
        model, base, conditions, world, prompt, subject_refs, style_refs,
        guidance or GuidanceConfig(), sampler or SamplerConfig(), n, sched or get_schedule(base.schedule_name),
    )
    return rows, model
