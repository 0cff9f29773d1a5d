"""
Variance-preserving noise schedules.

Every schedule exposes alpha_t, sigma_t, the log-SNR lambda_t = log(alpha^2 / sigma^2),
its time derivative and the loss weight w_t, all vectorised over numpy arrays of
times in [0, 1]. Times are clamped to [T_EPS, 1 - T_EPS] so that the derivative of
the log-SNR stays finite at the endpoints.
"""

from typing import Callable, Dict, Optional, Type

import numpy as np
from scipy import special

from .exceptions import ScheduleError

T_EPS = 1e-5


class NoiseSchedule:
    """Base class; subclasses implement alpha, sigma, log_snr and d_log_snr."""

    name: str = ''

    def __init__(self, weighting: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        # None means plain eps-prediction: -1/2 * w_t * lambda'_t == 1
        self.weighting = weighting

    def clamp(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ScheduleError(f"time must lie in [0, 1], got {t}")
        return np.clip(t, T_EPS, 1.0 - T_EPS)

    def alpha(self, t) -> np.ndarray:
        raise NotImplementedError

    def sigma(self, t) -> np.ndarray:
        raise NotImplementedError

    def log_snr(self, t) -> np.ndarray:
        raise NotImplementedError

    def d_log_snr(self, t) -> np.ndarray:
        raise NotImplementedError

    def weight(self, t) -> np.ndarray:
        if self.weighting is None:
            return -2.0 / self.d_log_snr(t)
        return np.asarray(self.weighting(self.clamp(t)), dtype=np.float64)

    def loss_scale(self, t) -> np.ndarray:
        """-1/2 * w_t * lambda'_t, the per-time factor of the weighted eps loss."""
        if self.weighting is None:
            return np.ones_like(self.clamp(t))
        return -0.5 * self.weight(t) * self.d_log_snr(t)

    def beta_t(self, t, beta: float) -> np.ndarray:
        """Schedule-derived temperature -1/2 * beta * lambda'_t (positive)."""
        return -0.5 * beta * self.d_log_snr(t)

    def __repr__(self):
        return f"{type(self).__name__}()"


class CosineSchedule(NoiseSchedule):
    """alpha_t = cos(pi t / 2), sigma_t = sin(pi t / 2)."""

    name = 'cosine'

    def alpha(self, t):
        return np.cos(0.5 * np.pi * self.clamp(t))

    def sigma(self, t):
        return np.sin(0.5 * np.pi * self.clamp(t))

    def log_snr(self, t):
        half_angle = 0.5 * np.pi * self.clamp(t)
        return 2.0 * (np.log(np.cos(half_angle)) - np.log(np.sin(half_angle)))

    def d_log_snr(self, t):
        return -2.0 * np.pi / np.sin(np.pi * self.clamp(t))


class LogSnrLinearSchedule(NoiseSchedule):
    """lambda_t falls linearly from lambda_max to lambda_min; alpha^2 = sigmoid(lambda)."""

    name = 'logsnr-linear'

    def __init__(self, lambda_max: float = 10.0, lambda_min: float = -10.0, weighting=None):
        if not lambda_max > lambda_min:
            raise ScheduleError("lambda_max must exceed lambda_min")
        super().__init__(weighting)
        self.lambda_max = lambda_max
        self.lambda_min = lambda_min

    def log_snr(self, t):
        return self.lambda_max + (self.lambda_min - self.lambda_max) * self.clamp(t)

    def d_log_snr(self, t):
        return np.full_like(self.clamp(t), self.lambda_min - self.lambda_max)

    def alpha(self, t):
        return np.sqrt(special.expit(self.log_snr(t)))

    def sigma(self, t):
        return np.sqrt(special.expit(-self.log_snr(t)))

    def __repr__(self):
        return f"LogSnrLinearSchedule(lambda_max={self.lambda_max}, lambda_min={self.lambda_min})"


SCHEDULES: Dict[str, Type[NoiseSchedule]] = {
    CosineSchedule.name: CosineSchedule,
    LogSnrLinearSchedule.name: LogSnrLinearSchedule,
}


def get_schedule(name: str) -> NoiseSchedule:
    try:
        return SCHEDULES[name]()
    except KeyError:
        raise ScheduleError(f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}") from None


def midpoint_grid(size: int) -> np.ndarray:
    """Stratified time grid: the midpoints of ``size`` equal strata of (0, 1)."""
    if size < 1:
        raise ScheduleError("grid needs at least one point")
    return (np.arange(size) + 0.5) / size
