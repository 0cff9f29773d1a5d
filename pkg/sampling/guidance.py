"""
Guided noise predictors.

Both guidance rules are evaluated as weighted sums of the branch predictions,
so special scales reproduce a single branch exactly:

- classifier-free: omega * eps(z; c) + (1 - omega) * eps(z; null)
- consistency:     (omega_text - omega_con) * eps_phi(z; c)
                   + (1 - omega_text) * eps_phi(z; null)
                   + omega_con * eps_theta(z; c)

which equal eps(z; null) + omega (eps(z; c) - eps(z; null)) and
eps_phi(z; null) + omega_text (eps_phi(z; c) - eps_phi(z; null))
+ omega_con (eps_theta(z; c) - eps_phi(z; c)).
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from dcolab.conf import lab_setting, setting_default

from .exceptions import GuidanceError

EpsFn = Callable[[np.ndarray, float], np.ndarray]


def _first_consistency_scale():
    return lab_setting('OMEGA_CON')[0]


@dataclass(frozen=True)
class GuidanceConfig:
    omega_text: float = field(default_factory=setting_default('OMEGA_TEXT'))
    omega_con: float = field(default_factory=_first_consistency_scale)
    plain_cfg: bool = False
    # scale of plain CFG on the fine-tuned model; defaults to omega_text
    omega: Optional[float] = None

    def __post_init__(self):
        for name in ('omega_text', 'omega_con', 'omega'):
            value = getattr(self, name)
            if value is None:
                continue
            if not np.isfinite(value) or value < 0:
                raise GuidanceError(f"{name} must be finite and non-negative, got {value}")

    @property
    def cfg_scale(self) -> float:
        return self.omega_text if self.omega is None else self.omega


def cfg_eps(model, z, c, t, omega: float) -> np.ndarray:
    eps_c = model.predict(z, c, t)
    eps_null = model.predict(z, None, t)
    return omega * eps_c + (1.0 - omega) * eps_null


def consistency_guided_eps(theta, phi, z, c, t, cfg: GuidanceConfig) -> np.ndarray:
    """Consistency guidance; ``phi`` sees ``theta``'s embedding of ``c``."""
    if theta.data_dim != phi.data_dim:
        raise GuidanceError(f"models predict {theta.data_dim} and {phi.data_dim} dims")
    phi_condition = theta.condition_embedding(c)
    eps_phi_c = phi.predict(z, phi_condition, t)
    eps_phi_null = phi.predict(z, None, t)
    eps_theta_c = theta.predict(z, c, t)
    return (
        (cfg.omega_text - cfg.omega_con) * eps_phi_c
        + (1.0 - cfg.omega_text) * eps_phi_null
        + cfg.omega_con * eps_theta_c
    )


class ClassifierFreeGuidance:
    def __init__(self, model, condition, omega: float):
        self.model = model
        self.condition = condition
        self.omega = omega

    def __call__(self, z, t) -> np.ndarray:
        return cfg_eps(self.model, z, self.condition, t, self.omega)


class ConsistencyGuidance:
    def __init__(self, theta, phi, condition, cfg: GuidanceConfig):
        self.theta = theta
        self.phi = phi
        self.condition = condition
        self.cfg = cfg

    def __call__(self, z, t) -> np.ndarray:
        return consistency_guided_eps(self.theta, self.phi, z, self.condition, t, self.cfg)


def guided_predictor(theta, phi, condition, cfg: GuidanceConfig) -> EpsFn:
    """Plain CFG on ``theta`` when ``cfg.plain_cfg`` is set, consistency guidance otherwise."""
    if cfg.plain_cfg:
        return ClassifierFreeGuidance(theta, condition, cfg.cfg_scale)
    return ConsistencyGuidance(theta, phi, condition, cfg)
