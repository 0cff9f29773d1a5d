"""Noise-distance diagnostics between a fine-tuned model and its base."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from dcolab.conf import lab_setting
from diffusion.process import ConditionedSample, forward_draw, stack_batch
from diffusion.schedules import NoiseSchedule, get_schedule, midpoint_grid

from .exceptions import TrainingError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeviationReport:
    t_grid: np.ndarray
    mean_distance: np.ndarray
    stderr: np.ndarray

    @property
    def overall(self) -> float:
        return float(np.mean(self.mean_distance))

    def rows(self):
        for t, distance, se in zip(self.t_grid, self.mean_distance, self.stderr):
            yield {'t': float(t), 'mean_distance': float(distance), 'stderr': float(se)}


def noise_distance_profile(
    theta,
    phi,
    ref_set: Sequence[ConditionedSample],
    t_grid=None,
    n_noise: Optional[int] = None,
    seed: int = 0,
    sched: Optional[NoiseSchedule] = None,
) -> DeviationReport:
    """Per-time mean of ||eps_theta(z_t; c, t) - eps_phi(z_t; c, t)||^2.

    ``n_noise`` noises are drawn per reference sample at every grid time; the
    reference model sees ``theta``'s embedding of each condition.
    """
    n_noise = lab_setting('NOISE_DRAWS') if n_noise is None else n_noise
    if n_noise < 1:
        raise TrainingError(f"n_noise must be at least 1, got {n_noise}")
    t_grid = midpoint_grid(lab_setting('DELTA_GRID')) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    t_grid = t_grid.reshape(-1)
    if t_grid.size == 0:
        raise TrainingError("time grid is empty")
    if not ref_set:
        raise TrainingError("reference set is empty")
    sched = sched or get_schedule(theta.schedule_name)

    x, conditions = stack_batch(ref_set)
    x = np.repeat(x, n_noise, axis=0)
    conditions = [c for c in conditions for _ in range(n_noise)]
    phi_conditions = [theta.condition_embedding(c) for c in conditions]
    rng = np.random.default_rng(seed)
    means, errors = [], []
    for t in t_grid:
        eps = rng.standard_normal(x.shape)
        times = np.full(x.shape[0], t)
        z = forward_draw(x, times, eps, sched)
        gap = theta.predict(z, conditions, times) - phi.predict(z, phi_conditions, times)
        distance = np.sum(gap * gap, axis=1)
        means.append(distance.mean())
        errors.append(distance.std(ddof=1) / np.sqrt(distance.size) if distance.size > 1 else 0.0)
    report = DeviationReport(t_grid, np.array(means), np.array(errors))
    logger.debug("noise distance over %d times: %.6g", t_grid.size, report.overall)
    return report


def write_deviation_report(path, report: DeviationReport) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='') as handle:
        writer = csv.writer(handle)
        writer.writerow(['t', 'mean_distance', 'stderr'])
        for row in report.rows():
            writer.writerow([repr(row['t']), repr(row['mean_distance']), repr(row['stderr'])])
    return path
