"""
Training loops.

``pretrain_base`` fits the pretrained model on the world's base conditions;
``finetune`` personalizes a frozen base with a LoRA adapter (and optionally a
new token) under one of three objectives: plain noise prediction (DM), noise
prediction with a class prior (DM+PRIOR), or the DCO loss against the frozen
base itself.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from adapters.lora import AdaptedEpsModel, LoraAdapter, TokenEmbedding, attach, save_adapter
from autodiff.exceptions import NonFiniteError
from autodiff.tensor import GradientTape
from dcolab.conf import lab_setting, setting_default
from diffusion.networks import EpsModel, ModelSpec
from diffusion.process import ConditionedSample, draw_noise
from diffusion.schedules import NoiseSchedule, get_schedule
from objectives.losses import (
    DcoConfig,
    PriorPreservationConfig,
    dco_loss_with_scale,
    dm_loss,
    prior_preservation_loss,
    reference_conditions,
)
from oracle.worlds import GaussianConceptWorld
from sampling.guidance import ClassifierFreeGuidance
from sampling.samplers import SamplerConfig, sample

from .exceptions import FrozenModelError, TrainingDivergedError, TrainingError
from .optim import Adam

logger = logging.getLogger(__name__)


class Objective(Enum):
    DM = 'dm'
    DM_PRIOR = 'dm-prior'
    DCO = 'dco'


@dataclass(frozen=True)
class TrainConfig:
    objective: Objective = Objective.DCO
    steps: int = 2000
    batch_size: int = 1
    adapter_lr: float = field(default_factory=setting_default('ADAPTER_LR'))
    embedding_lr: float = field(default_factory=setting_default('EMBEDDING_LR'))
    rank: int = field(default_factory=setting_default('SUBJECT_RANK'))
    adapter_scale: float = 1.0
    dco: DcoConfig = field(default_factory=DcoConfig)
    prior: PriorPreservationConfig = field(default_factory=PriorPreservationConfig)
    offset_noise: float = field(default_factory=setting_default('OFFSET_NOISE'))
    seed: int = 0
    # new condition token learned next to the adapter, initialised from an existing condition
    token: Optional[str] = None
    initializer: Optional[str] = None
    train_embedding: bool = True
    early_stop_steps: Optional[int] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        try:
            object.__setattr__(self, 'objective', Objective(self.objective))
        except ValueError:
            raise TrainingError(f"unknown objective {self.objective!r}") from None
        if self.steps < 1:
            raise TrainingError(f"steps must be at least 1, got {self.steps}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be at least 1, got {self.batch_size}")
        if not (self.adapter_lr > 0 and self.embedding_lr > 0):
            raise TrainingError("learning rates must be positive")
        if self.rank < 1:
            raise TrainingError(f"rank must be positive, got {self.rank}")
        if self.offset_noise < 0:
            raise TrainingError(f"offset noise must be non-negative, got {self.offset_noise}")
        if (self.token is None) != (self.initializer is None):
            raise TrainingError("token and initializer go together")
        if self.early_stop_steps is not None and not 1 <= self.early_stop_steps <= self.steps:
            raise TrainingError(f"early_stop_steps must lie in [1, {self.steps}]")

    @property
    def executed_steps(self) -> int:
        return self.steps if self.early_stop_steps is None else self.early_stop_steps

    def snapshot(self) -> dict:
        """Plain-data view for config.yaml."""
        return {
            'objective': self.objective.value,
            'steps': self.steps,
            'executed_steps': self.executed_steps,
            'batch_size': self.batch_size,
            'adapter_lr': self.adapter_lr,
            'embedding_lr': self.embedding_lr,
            'rank': self.rank,
            'adapter_scale': self.adapter_scale,
            'dco': {
                'beta': self.dco.beta,
                'beta_mode': self.dco.beta_mode.value,
                'beta_t': self.dco.beta_t,
            },
            'prior': {
                'lambda_prior': self.prior.lambda_prior,
                'prior_set_size': len(self.prior.prior_set),
            },
            'offset_noise': self.offset_noise,
            'seed': self.seed,
            'token': self.token,
            'initializer': self.initializer,
            'train_embedding': self.train_embedding,
            'early_stop_steps': self.early_stop_steps,
            'betas': list(self.betas),
            'adam_eps': self.adam_eps,
        }


@dataclass
class RunRecord:
    config: TrainConfig
    losses: List[float]
    # mean 1 - sigmoid(d_t) per step; empty unless the objective is DCO
    grad_scales: List[float]
    seed: int
    wall_clock: float
    model: AdaptedEpsModel
    base_checksum: str
    adapter_path: Optional[Path] = None

    @property
    def adapter(self) -> LoraAdapter:
        return self.model.adapter

    @property
    def tokens(self) -> List[TokenEmbedding]:
        return list(self.model.tokens.values())

    def save(self, directory) -> Path:
        """Write config.yaml, losses.csv and adapter.dcl under ``directory``.

        Wall-clock time is not written, so the directory is a pure function of
        (config, seed).
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        snapshot = {'run': self.config.snapshot(), 'base_checksum': self.base_checksum}
        (directory / 'config.yaml').write_text(yaml.safe_dump(snapshot, sort_keys=True))
        write_loss_trace(directory / 'losses.csv', self.losses, self.grad_scales)
        self.adapter_path = directory / 'adapter.dcl'
        save_adapter(self.adapter, self.adapter_path, self.tokens, base_checksum=self.base_checksum)
        logger.info("saved run to %s", directory)
        return directory


def write_loss_trace(path, losses: Sequence[float], grad_scales: Sequence[float] = ()) -> Path:
    path = Path(path)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['step', 'loss', 'grad_scale'])
        for step, loss in enumerate(losses):
            scale = repr(float(grad_scales[step])) if step < len(grad_scales) else ''
            writer.writerow([step, repr(float(loss)), scale])
    return path


def read_loss_trace(path) -> Tuple[List[float], List[float]]:
    losses, scales = [], []
    with Path(path).open(newline='') as handle:
        for row in csv.DictReader(handle):
            losses.append(float(row['loss']))
            if row['grad_scale']:
                scales.append(float(row['grad_scale']))
    return losses, scales


# -- base pretraining -------------------------------------------------------------

def _base_batch(world: GaussianConceptWorld, batch_size: int, dropout: float, rng) -> List[ConditionedSample]:
    conditions = world.pretrain_conditions
    picks = rng.integers(len(conditions), size=batch_size)
    x = np.empty((batch_size, world.dim))
    for index, name in enumerate(conditions):
        rows = np.flatnonzero(picks == index)
        if rows.size:
            x[rows] = world.sample(name, rows.size, rng)
    dropped = rng.uniform(size=batch_size) < dropout
    return [
        ConditionedSample(row, None if drop else conditions[pick])
        for row, pick, drop in zip(x, picks, dropped)
    ]


def pretrain_base(
    world: GaussianConceptWorld,
    spec: ModelSpec,
    steps: int,
    seed: int = 0,
    sched: Optional[NoiseSchedule] = None,
    lr: Optional[float] = None,
    batch_size: Optional[int] = None,
    condition_dropout: Optional[float] = None,
    offset_noise: Optional[float] = None,
) -> EpsModel:
    """Fit a fresh model with the noise-prediction loss on the world's base conditions.

    Labels are replaced by the null condition with probability
    ``condition_dropout`` so the model also learns the unconditional branch.
    Returns a frozen model.
    """
    if steps < 1:
        raise TrainingError(f"steps must be at least 1, got {steps}")
    if spec.data_dim != world.dim:
        raise TrainingError(f"model predicts {spec.data_dim} dims, world has {world.dim}")
    sched = sched or get_schedule(lab_setting('SCHEDULE'))
    lr = lab_setting('BASE_LR') if lr is None else lr
    batch_size = lab_setting('BASE_BATCH') if batch_size is None else batch_size
    dropout = lab_setting('CONDITION_DROPOUT') if condition_dropout is None else condition_dropout
    offset_noise = lab_setting('OFFSET_NOISE') if offset_noise is None else offset_noise
    if not 0.0 <= dropout < 1.0:
        raise TrainingError(f"condition dropout must lie in [0, 1), got {dropout}")

    rng = np.random.default_rng(seed)
    model = EpsModel.initialize(spec, world.pretrain_conditions, seed=seed, schedule_name=sched.name)
    params = model.trainable_parameters()
    optimizer = Adam([{'params': params, 'lr': lr}])
    log_every = lab_setting('LOG_EVERY')
    for step in range(steps):
        batch = _base_batch(world, batch_size, dropout, rng)
        draws = draw_noise(rng, batch_size, world.dim, offset_noise)
        try:
            with GradientTape() as tape:
                tape.watch(*params)
                loss = dm_loss(model, batch, sched, draws)
            optimizer.step(tape.backward(loss))
        except NonFiniteError as exc:
            logger.error("base pretraining diverged at step %d: %s", step, exc)
            raise TrainingDivergedError(f"base pretraining diverged at step {step}", step=step) from exc
        if (step + 1) % log_every == 0:
            logger.info("base step %d/%d loss %.6f", step + 1, steps, loss.item())
    logger.info("pretrained %r for %d steps", model, steps)
    return model.freeze()


# -- fine-tuning ------------------------------------------------------------------

def _minibatch(samples: Sequence[ConditionedSample], size: int, rng) -> List[ConditionedSample]:
    return [samples[i] for i in rng.integers(len(samples), size=size)]


def _step_loss(model, base, cfg: TrainConfig, sched, ref_set, prior_set, rng):
    """(loss tensor, mean gradient scale or None) for one minibatch."""
    batch = _minibatch(ref_set, cfg.batch_size, rng)
    draws = draw_noise(rng, len(batch), model.data_dim, cfg.offset_noise)
    if cfg.objective is Objective.DM:
        return dm_loss(model, batch, sched, draws), None
    if cfg.objective is Objective.DM_PRIOR:
        prior_batch = _minibatch(prior_set, cfg.batch_size, rng)
        prior_draws = draw_noise(rng, len(prior_batch), model.data_dim, cfg.offset_noise)
        return prior_preservation_loss(model, batch, prior_batch, cfg.prior, sched, draws, prior_draws), None
    ref_conditions = reference_conditions(model, [s.c for s in batch])
    loss, scales = dco_loss_with_scale(model, base, batch, cfg.dco, sched, draws, ref_conditions)
    return loss, float(np.mean(scales))


def finetune(
    base: EpsModel,
    ref_set: Sequence[ConditionedSample],
    cfg: TrainConfig,
    sched: Optional[NoiseSchedule] = None,
) -> RunRecord:
    """Train an adapter (and the token, if configured) on ``ref_set``; ``base`` never changes."""
    if not base.frozen:
        raise FrozenModelError("fine-tuning needs a frozen base model")
    ref_set = list(ref_set)
    if not ref_set:
        raise TrainingError("reference set is empty")
    prior_set = list(cfg.prior.prior_set)
    if cfg.objective is Objective.DM_PRIOR and not prior_set:
        raise TrainingError("DM+PRIOR needs a non-empty prior set")
    sched = sched or get_schedule(base.schedule_name)

    checksum = base.checksum()
    adapter = LoraAdapter.initialize(base, cfg.rank, seed=cfg.seed, scale=cfg.adapter_scale)
    tokens = [TokenEmbedding.from_initializer(base, cfg.token, cfg.initializer)] if cfg.token else []
    model = attach(base, adapter, tokens, train_embedding=cfg.train_embedding)
    groups = [{'params': adapter.trainable_parameters(), 'lr': cfg.adapter_lr}]
    if tokens and cfg.train_embedding:
        groups.append({'params': [t.vector for t in tokens], 'lr': cfg.embedding_lr})
    optimizer = Adam(groups, betas=cfg.betas, eps=cfg.adam_eps)
    params = optimizer.params

    rng = np.random.default_rng(cfg.seed)
    losses, grad_scales = [], []
    log_every = lab_setting('LOG_EVERY')
    started = time.perf_counter()
    for step in range(cfg.executed_steps):
        try:
            with GradientTape() as tape:
                tape.watch(*params)
                loss, scale = _step_loss(model, base, cfg, sched, ref_set, prior_set, rng)
            grads = tape.backward(loss)
        except NonFiniteError as exc:
            logger.error("%s run diverged at step %d: %s", cfg.objective.value, step, exc)
            raise TrainingDivergedError(f"non-finite loss at step {step}", step=step) from exc
        value = loss.item()
        if not np.isfinite(value):
            logger.error("%s run diverged at step %d (loss %r)", cfg.objective.value, step, value)
            raise TrainingDivergedError(f"non-finite loss at step {step}", step=step, loss=value)
        optimizer.step(grads)
        losses.append(value)
        if scale is not None:
            grad_scales.append(scale)
        if (step + 1) % log_every == 0:
            logger.info("%s step %d/%d loss %.6f", cfg.objective.value, step + 1, cfg.executed_steps, value)

    if base.checksum() != checksum:
        raise FrozenModelError("base model changed during fine-tuning")
    wall_clock = time.perf_counter() - started
    logger.info("finished %s run (seed %d) in %.2fs", cfg.objective.value, cfg.seed, wall_clock)
    return RunRecord(cfg, losses, grad_scales, cfg.seed, wall_clock, model, checksum)


def synthesize_prior_set(
    base,
    condition: str,
    n: int,
    seed: int = 0,
    sched: Optional[NoiseSchedule] = None,
    omega: Optional[float] = None,
    steps: Optional[int] = None,
) -> List[ConditionedSample]:
    """Class-prior samples drawn from the pretrained model with classifier-free guidance."""
    if n < 1:
        raise TrainingError(f"prior set size must be positive, got {n}")
    sched = sched or get_schedule(base.schedule_name)
    omega = lab_setting('OMEGA_TEXT') if omega is None else omega
    sampler = SamplerConfig(seed=seed) if steps is None else SamplerConfig(steps=steps, seed=seed)
    x = sample(ClassifierFreeGuidance(base, condition, omega), sched, sampler, n, base.data_dim)
    return [ConditionedSample(row, condition) for row in x]
