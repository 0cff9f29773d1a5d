"""Forward (noising) process and the draws shared between coupled model evaluations."""

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from autodiff.exceptions import LabError, ShapeError

from .schedules import NoiseSchedule

NULL_CONDITION = '<null>'

# a condition id, None for the null condition, or a raw embedding vector
Condition = Union[str, None, np.ndarray]


@dataclass(frozen=True)
class ConditionedSample:
    x: np.ndarray
    c: Condition

    def __post_init__(self):
        object.__setattr__(self, 'x', np.asarray(self.x, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class NoiseDraws:
    """Times and noises for one batch; fed identically to every model branch."""

    t: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        eps = np.atleast_2d(np.asarray(self.eps, dtype=np.float64))
        if eps.shape[0] != t.shape[0]:
            raise ShapeError(f"{t.shape[0]} times but {eps.shape[0]} noise rows")
        object.__setattr__(self, 't', t)
        object.__setattr__(self, 'eps', eps)

    def __len__(self):
        return self.t.shape[0]


def stack_batch(batch: Sequence[ConditionedSample]):
    """(n, d) data matrix and the list of conditions of a batch."""
    if not batch:
        raise LabError("batch is empty")
    dims = {sample.x.shape[0] for sample in batch}
    if len(dims) != 1:
        raise ShapeError(f"batch mixes data dimensions {sorted(dims)}")
    return np.stack([sample.x for sample in batch]), [sample.c for sample in batch]


def _column(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1 and like.ndim == 2:
        return values[:, None]
    return values


def forward_draw(x, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """z_t = alpha_t * x + sigma_t * eps for one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ShapeError(f"data shape {x.shape} and noise shape {eps.shape} differ")
    return _column(sched.alpha(t), x) * x + _column(sched.sigma(t), x) * eps


def apply_offset_noise(eps, strength: float, u) -> np.ndarray:
    """Add the same scalar draw ``strength * u`` to every coordinate of each noise row."""
    if strength < 0:
        raise LabError(f"offset-noise strength must be non-negative, got {strength}")
    eps = np.asarray(eps, dtype=np.float64)
    return eps + strength * _column(u, eps)


def draw_noise(
    rng: np.random.Generator,
    batch_size: int,
    dim: int,
    offset_noise: float = 0.0,
    t_low: float = 0.0,
    t_high: float = 1.0,
) -> NoiseDraws:
    t = rng.uniform(t_low, t_high, size=batch_size)
    eps = rng.standard_normal((batch_size, dim))
    if offset_noise > 0:
        eps = apply_offset_noise(eps, offset_noise, rng.standard_normal(batch_size))
    return NoiseDraws(t=t, eps=eps)

