"""
Fine-tuning objectives.

``dm_loss`` is the weighted noise-prediction loss, ``prior_preservation_loss``
adds a class-prior term, and ``dco_loss`` scores the fine-tuned model's noise
error against a frozen reference model's error on the *same* (t, eps) draws
through a log-sigmoid. The reference branch is evaluated with plain numpy
values, so nothing flows into the reference model.

The reference model sees the fine-tuned model's embedding of the condition as
a raw vector, so new tokens that only the fine-tuned model knows are shared
with the reference. That vector is a snapshot taken when the loss is built, or
passed in as ``ref_conditions``. It is a constant of the loss: the tape
gradient with respect to a learned token covers the fine-tuned branch only.
Finite-difference checks must hold the same snapshot fixed.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, Sequence, Tuple

import numpy as np
from scipy import special

from autodiff import tensor as ad
from autodiff.exceptions import ShapeError
from autodiff.gradcheck import relative_error
from autodiff.tensor import GradientTape, Tensor
from dcolab.conf import setting_default
from diffusion.process import ConditionedSample, NoiseDraws, forward_draw, stack_batch
from diffusion.schedules import NoiseSchedule, midpoint_grid

from .exceptions import ObjectiveError, ReferenceModelError

logger = logging.getLogger(__name__)


class BetaMode(Enum):
    CONSTANT = 'constant'
    THEORETICAL = 'theoretical'


@dataclass(frozen=True)
class DcoConfig:
    """Temperature of the DCO loss.

    CONSTANT uses ``beta_t`` at every time; THEORETICAL derives
    beta_t = -1/2 * beta * lambda'_t from the schedule.
    """

    beta: float = field(default_factory=setting_default('BETA_T'))
    beta_mode: BetaMode = BetaMode.CONSTANT
    beta_t: float = field(default_factory=setting_default('BETA_T'))

    def __post_init__(self):
        object.__setattr__(self, 'beta_mode', BetaMode(self.beta_mode))
        if not self.beta > 0 or not self.beta_t > 0:
            raise ObjectiveError(f"temperatures must be positive, got beta={self.beta}, beta_t={self.beta_t}")

    def temperature(self, t, sched: NoiseSchedule) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.beta_mode is BetaMode.THEORETICAL:
            return sched.beta_t(t, self.beta)
        return np.full(t.shape, self.beta_t)


@dataclass(frozen=True)
class PriorPreservationConfig:
    lambda_prior: float = 1.0
    prior_set: Sequence[ConditionedSample] = ()

    def __post_init__(self):
        if self.lambda_prior < 0:
            raise ObjectiveError(f"lambda_prior must be non-negative, got {self.lambda_prior}")


# -- shared pieces ------------------------------------------------------------

def _latents(batch: Sequence[ConditionedSample], draws: NoiseDraws, sched: NoiseSchedule):
    if not batch:
        raise ObjectiveError("batch is empty")
    x, conditions = stack_batch(batch)
    if len(draws) != x.shape[0]:
        raise ObjectiveError(f"{len(draws)} draws for a batch of {x.shape[0]}")
    return conditions, forward_draw(x, draws.t, draws.eps, sched)


def eps_errors(model, z, conditions, t, eps) -> Tensor:
    """(n, 1) squared noise errors ||eps_hat(z; c, t) - eps||^2, recorded on the active tape."""
    prediction = model.forward(z, conditions, t)
    if prediction.shape != np.shape(eps):
        raise ShapeError(f"prediction {prediction.shape} does not match noise {np.shape(eps)}")
    return ad.sum(ad.square(ad.subtract(prediction, Tensor(eps))), axis=1)


def reference_conditions(model, conditions):
    """Snapshot of the embeddings the reference branch sees for ``conditions``."""
    if conditions is None or isinstance(conditions, (str, np.ndarray)):
        return model.condition_embedding(conditions)
    return [model.condition_embedding(c) for c in conditions]


def _check_reference(model, ref_model) -> None:
    if not getattr(ref_model, 'frozen', False):
        raise ReferenceModelError("the reference model must be frozen")
    if ref_model.data_dim != model.data_dim:
        raise ReferenceModelError(f"reference predicts {ref_model.data_dim} dims, model {model.data_dim}")


def reference_errors(model, ref_model, z, conditions, t, eps, ref_conditions=None) -> np.ndarray:
    """The reference branch: plain values, never on a tape."""
    if ref_conditions is None:
        ref_conditions = reference_conditions(model, conditions)
    elif len(ref_conditions) != len(conditions):
        raise ObjectiveError(f"{len(ref_conditions)} reference conditions for a batch of {len(conditions)}")
    return eps_errors(ref_model, z, ref_conditions, t, eps).numpy()


# -- losses -------------------------------------------------------------------

def dm_loss(model, batch: Sequence[ConditionedSample], sched: NoiseSchedule, draws: NoiseDraws) -> Tensor:
    """Mean of (-1/2 w_t lambda'_t) ||eps_hat - eps||^2 over the batch."""
    conditions, z = _latents(batch, draws, sched)
    errors = eps_errors(model, z, conditions, draws.t, draws.eps)
    scale = sched.loss_scale(draws.t)[:, None]
    return ad.mean(ad.multiply(Tensor(scale), errors))


def prior_preservation_loss(
    model,
    ref_batch: Sequence[ConditionedSample],
    prior_batch: Sequence[ConditionedSample],
    cfg: PriorPreservationConfig,
    sched: NoiseSchedule,
    ref_draws: NoiseDraws,
    prior_draws: NoiseDraws,
) -> Tensor:
    if not prior_batch:
        raise ObjectiveError("prior batch is empty")
    ref_term = dm_loss(model, ref_batch, sched, ref_draws)
    prior_term = dm_loss(model, prior_batch, sched, prior_draws)
    return ad.add(ref_term, ad.multiply(prior_term, cfg.lambda_prior))


def _dco_margin(model, ref_model, batch, cfg: DcoConfig, sched, draws, ref_conditions=None):
    """d_t = -beta_t (l(theta) - l(phi)) as a tape tensor, plus the (n, 1) temperature."""
    _check_reference(model, ref_model)
    conditions, z = _latents(batch, draws, sched)
    ell_theta = eps_errors(model, z, conditions, draws.t, draws.eps)
    ell_phi = reference_errors(model, ref_model, z, conditions, draws.t, draws.eps, ref_conditions)
    beta_t = cfg.temperature(draws.t, sched)[:, None]
    return ad.multiply(Tensor(-beta_t), ad.subtract(ell_theta, Tensor(ell_phi))), beta_t, ell_theta


def dco_loss(model, ref_model, batch, cfg: DcoConfig, sched: NoiseSchedule, draws: NoiseDraws, ref_conditions=None) -> Tensor:
    """Mean over the batch of -log sigmoid(-beta_t (l(theta) - l(phi)))."""
    return dco_loss_with_scale(model, ref_model, batch, cfg, sched, draws, ref_conditions)[0]


def dco_loss_with_scale(model, ref_model, batch, cfg: DcoConfig, sched: NoiseSchedule, draws: NoiseDraws, ref_conditions=None):
    """The DCO loss together with the per-sample gradient scales 1 - sigmoid(d_t)."""
    margin, _, _ = _dco_margin(model, ref_model, batch, cfg, sched, draws, ref_conditions)
    loss = ad.negate(ad.mean(ad.log_sigmoid(margin)))
    return loss, special.expit(-margin.values.reshape(-1))


def dco_gradient_scale(model, ref_model, batch, cfg: DcoConfig, sched: NoiseSchedule, draws: NoiseDraws) -> np.ndarray:
    """Per-sample 1 - sigmoid(d_t): how strongly each draw pushes theta (0.5 when theta = phi)."""
    return dco_loss_with_scale(model, ref_model, batch, cfg, sched, draws)[1]


def gradient_factorization_error(model, ref_model, batch, cfg: DcoConfig, sched: NoiseSchedule, draws: NoiseDraws) -> float:
    """Largest relative gap between the tape gradient of ``dco_loss`` and
    mean_i beta_t,i (1 - sigmoid(d_i)) grad l_i(theta), over the trainable parameters."""
    params = model.trainable_parameters()
    with GradientTape() as tape:
        tape.watch(*params)
        loss = dco_loss(model, ref_model, batch, cfg, sched, draws)
    direct = tape.backward(loss)

    with GradientTape() as tape:
        tape.watch(*params)
        margin, beta_t, ell_theta = _dco_margin(model, ref_model, batch, cfg, sched, draws)
        coefficient = beta_t * special.expit(-margin.values)
        surrogate = ad.mean(ad.multiply(Tensor(coefficient), ell_theta))
    factored = tape.backward(surrogate)
    return max(relative_error(direct[p.node_id].values, factored[p.node_id].values) for p in params)


# -- Monte-Carlo deviation ------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


def _stratified_differences(
    model, ref_model, batch, sched, n_draws: int, grid_size: int, seed: int,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """(t, l(theta) - l(phi)) over a stratified grid, n_draws noises per grid point, per sample."""
    if n_draws < 1:
        raise ObjectiveError(f"n_draws must be at least 1, got {n_draws}")
    if not batch:
        raise ObjectiveError("batch is empty")
    _check_reference(model, ref_model)
    x, conditions = stack_batch(batch)
    rng = np.random.default_rng(seed)
    t = np.repeat(midpoint_grid(grid_size), n_draws)
    for row, condition in zip(x, conditions):
        eps = rng.standard_normal((t.size, x.shape[1]))
        z = forward_draw(np.broadcast_to(row, eps.shape), t, eps, sched)
        ell_theta = eps_errors(model, z, condition, t, eps).values.reshape(-1)
        ell_phi = reference_errors(model, ref_model, z, condition, t, eps).reshape(-1)
        yield t, ell_theta - ell_phi


def _stratified_mean(values: np.ndarray, n_draws: int, grid_size: int) -> Estimate:
    if n_draws > 1:
        strata = values.reshape(grid_size, n_draws)
        variance = np.sum(strata.var(axis=1, ddof=1) / n_draws) / grid_size ** 2
    else:
        variance = values.var() / values.size
    return Estimate(float(values.mean()), float(np.sqrt(variance)))


def _combine(estimates) -> Estimate:
    estimates = list(estimates)
    value = float(np.mean([e.value for e in estimates]))
    stderr = float(np.sqrt(np.sum([e.stderr ** 2 for e in estimates])) / len(estimates))
    return Estimate(value, stderr)


def delta_estimate(
    model,
    ref_model,
    batch: Sequence[ConditionedSample],
    sched: NoiseSchedule,
    n_draws: int,
    grid_size: int = 64,
    seed: int = 0,
    weighted: bool = False,
) -> Estimate:
    """Monte-Carlo deviation 1/2 E[lambda'_t (l(theta) - l(phi))], averaged over the batch.

    Positive when the fine-tuned model explains the batch better than the
    reference. ``weighted`` multiplies the integrand by w_t.
    """
    per_sample = []
    for t, difference in _stratified_differences(model, ref_model, batch, sched, n_draws, grid_size, seed):
        integrand = 0.5 * sched.d_log_snr(t) * difference
        if weighted:
            integrand = integrand * sched.weight(t)
        per_sample.append(_stratified_mean(integrand, n_draws, grid_size))
    return _combine(per_sample)


def dco_loss_estimate(
    model,
    ref_model,
    batch: Sequence[ConditionedSample],
    cfg: DcoConfig,
    sched: NoiseSchedule,
    n_draws: int,
    grid_size: int = 64,
    seed: int = 0,
) -> Estimate:
    """Mean DCO loss on the same stratified draws as ``delta_estimate`` with the same seed."""
    per_sample = []
    for t, difference in _stratified_differences(model, ref_model, batch, sched, n_draws, grid_size, seed):
        losses = -special.log_expit(-cfg.temperature(t, sched) * difference)
        per_sample.append(_stratified_mean(losses, n_draws, grid_size))
    return _combine(per_sample)


def parameter_gradients(loss_fn, params) -> Dict[int, np.ndarray]:
    """Tape gradients of ``loss_fn()`` for ``params``, keyed by node id."""
    with GradientTape() as tape:
        tape.watch(*params)
        loss = loss_fn()
    grads = tape.backward(loss)
    return {p.node_id: grads[p.node_id].values for p in params}
