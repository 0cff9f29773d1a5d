"""Deterministic DDIM sampling along a uniform time grid."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from dcolab.conf import setting_default
from diffusion.schedules import NoiseSchedule

from .exceptions import SamplerError
from .guidance import EpsFn

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = field(default_factory=setting_default('SAMPLER_STEPS'))
    seed: int = 0
    # must stay below 1 for learned predictors: x_hat divides the prediction error by alpha_t
    t_max: float = field(default_factory=setting_default('SAMPLER_T_MAX'))
    t_min: float = field(default_factory=setting_default('SAMPLER_T_MIN'))
    # clip x_hat to [-clip_denoised, clip_denoised] at every step
    clip_denoised: Optional[float] = None

    def __post_init__(self):
        if self.steps < 1:
            raise SamplerError(f"steps must be at least 1, got {self.steps}")
        if not 0.0 <= self.t_min < self.t_max <= 1.0:
            raise SamplerError(f"need 0 <= t_min < t_max <= 1, got {self.t_min}, {self.t_max}")
        if self.clip_denoised is not None and not self.clip_denoised > 0:
            raise SamplerError("clip_denoised must be positive")

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.t_max, self.t_min, self.steps + 1)


def sample(eps_fn: EpsFn, sched: NoiseSchedule, cfg: SamplerConfig, n: int, dim: int) -> np.ndarray:
    """Run n chains from z_{t_max} ~ N(0, I) and return the final denoised estimates x_hat.

    Each step predicts x_hat = (z_t - sigma_t eps_hat) / alpha_t and moves to
    z_t' = alpha_t' x_hat + sigma_t' eps_hat; the last x_hat is taken at t_min.
    """
    if n < 1:
        raise SamplerError(f"need at least one chain, got {n}")
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((n, dim))
    grid = cfg.grid
    x_hat = z
    for index, t in enumerate(grid):
        alpha, sigma = float(sched.alpha(t)), float(sched.sigma(t))
        if alpha == 0.0:
            raise SamplerError(f"alpha vanishes at t={t}")
        eps = np.asarray(eps_fn(z, t), dtype=np.float64)
        if eps.shape != z.shape:
            raise SamplerError(f"predictor returned {eps.shape} for latents {z.shape}")
        x_hat = (z - sigma * eps) / alpha
        if cfg.clip_denoised is not None:
            x_hat = np.clip(x_hat, -cfg.clip_denoised, cfg.clip_denoised)
        if index + 1 < grid.size:
            t_next = grid[index + 1]
            z = float(sched.alpha(t_next)) * x_hat + float(sched.sigma(t_next)) * eps
    if not np.all(np.isfinite(x_hat)):
        raise SamplerError("sampling diverged")
    return x_hat


SAMPLE_COLUMNS = ('seed', 'condition', 'omega_text', 'omega_con')


def write_sample_dump(path, rows: Iterable[dict], dim: int) -> Path:
    """CSV with columns seed, condition, omega_text, omega_con, x0..x{dim-1}.

    Each row is a dict holding those four keys and ``x`` (a length-``dim`` vector).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(list(SAMPLE_COLUMNS) + [f'x{i}' for i in range(dim)])
        for row in rows:
            values = np.asarray(row['x'], dtype=np.float64).reshape(-1)
            writer.writerow(
                [row['seed'], row['condition'], repr(float(row['omega_text'])), repr(float(row['omega_con']))]
                + [repr(float(v)) for v in values]
            )
    return path


def read_sample_dump(path):
    """Rows of a sample dump as (metadata dict, x vector) pairs."""
    with Path(path).open(newline='') as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            x = np.array([float(row[k]) for k in reader.fieldnames if k.startswith('x')])
            meta = {
                'seed': int(row['seed']),
                'condition': row['condition'],
                'omega_text': float(row['omega_text']),
                'omega_con': float(row['omega_con']),
            }
            yield meta, x
