"""
Gaussian concept worlds: the ground-truth data distributions of the laboratory.

Each condition id maps to a Gaussian mixture. Conditions flagged ``pretrain``
make up the base training distribution; the others are concepts reserved for
personalization (reference sets drawn from them).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy import special, stats

from diffusion.process import ConditionedSample

from .exceptions import WorldError
from .serializers import WorldSerializer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'mean', np.asarray(self.mean, dtype=np.float64).reshape(-1))
        object.__setattr__(self, 'cov', np.atleast_2d(np.asarray(self.cov, dtype=np.float64)))


class GaussianConceptWorld:
    def __init__(
        self,
        conditions: Mapping[str, Sequence[GaussianComponent]],
        seed: int = 0,
        pretrain: Optional[Sequence[str]] = None,
    ):
        if not conditions:
            raise WorldError("a world needs at least one condition")
        self.conditions: Dict[str, List[GaussianComponent]] = {k: list(v) for k, v in conditions.items()}
        self.seed = seed
        self.pretrain_conditions = list(pretrain) if pretrain is not None else list(self.conditions)
        for name in self.pretrain_conditions:
            if name not in self.conditions:
                raise WorldError(f"pretrain condition {name!r} is not defined")

        dims = set()
        for name, components in self.conditions.items():
            if not components:
                raise WorldError(f"condition {name!r} has no components")
            weights = np.array([c.weight for c in components])
            if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-9:
                raise WorldError(f"condition {name!r}: weights must be positive and sum to 1")
            for component in components:
                d = component.mean.shape[0]
                dims.add(d)
                cov = component.cov
                if cov.shape != (d, d) or not np.allclose(cov, cov.T, atol=1e-12):
                    raise WorldError(f"condition {name!r}: covariance must be symmetric {d}x{d}")
                try:
                    np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    raise WorldError(f"condition {name!r}: covariance is not positive-definite") from None
        if len(dims) != 1:
            raise WorldError(f"conditions disagree on the data dimension: {sorted(dims)}")
        self.dim = dims.pop()

    def components(self, condition: str) -> List[GaussianComponent]:
        try:
            return self.conditions[condition]
        except KeyError:
            raise WorldError(f"unknown condition {condition!r}") from None

    def sample(self, condition: str, n: int, rng: np.random.Generator) -> np.ndarray:
        components = self.components(condition)
        weights = np.array([c.weight for c in components])
        picks = rng.choice(len(components), size=n, p=weights)
        out = np.empty((n, self.dim))
        for index, component in enumerate(components):
            rows = np.flatnonzero(picks == index)
            if rows.size:
                out[rows] = rng.multivariate_normal(component.mean, component.cov, size=rows.size)
        return out

    def conditioned_samples(
        self,
        condition: str,
        n: int,
        rng: np.random.Generator,
        label=None,
    ) -> List[ConditionedSample]:
        """Draws from ``condition`` labelled with ``label`` (defaults to the condition id)."""
        label = condition if label is None else label
        return [ConditionedSample(x, label) for x in self.sample(condition, n, rng)]

    def log_density(self, x, condition: str) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        terms = [
            np.log(c.weight) + stats.multivariate_normal.logpdf(x, c.mean, c.cov).reshape(-1)
            for c in self.components(condition)
        ]
        return special.logsumexp(np.stack(terms), axis=0)

    def fidelity_band(self, condition: str) -> Tuple[float, float]:
        """(low, high) log-density band used to rescale prompt fidelity into [0, 1].

        ``high`` is the best density over the component means; ``low`` lies half
        the 99.9% chi-square quantile below it.
        """
        means = np.stack([c.mean for c in self.components(condition)])
        high = float(np.max(self.log_density(means, condition)))
        return high - 0.5 * float(stats.chi2.ppf(0.999, self.dim)), high

    def __repr__(self):
        return f"GaussianConceptWorld(dim={self.dim}, conditions={list(self.conditions)})"


def world_from_mapping(data: Mapping) -> GaussianConceptWorld:
    serializer = WorldSerializer(data=data)
    if not serializer.is_valid():
        raise WorldError("invalid world specification", errors=serializer.errors)
    validated = serializer.validated_data
    conditions, pretrain = {}, []
    for name, spec in validated['conditions'].items():
        components = []
        for entry in spec['components']:
            if 'cov' in entry:
                cov = np.asarray(entry['cov'])
            else:
                factor = np.asarray(entry['cov_factor'])
                cov = factor @ factor.T
            components.append(GaussianComponent(entry['weight'], entry['mean'], cov))
        total = sum(c.weight for c in components)
        conditions[name] = [GaussianComponent(c.weight / total, c.mean, c.cov) for c in components]
        if spec['pretrain']:
            pretrain.append(name)
    return GaussianConceptWorld(conditions, seed=validated['seed'], pretrain=pretrain)


def load_world(path) -> GaussianConceptWorld:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise WorldError(f"cannot read world file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise WorldError(f"{path}: {exc}") from exc
    world = world_from_mapping(data or {})
    logger.info("loaded world %s from %s", world, path)
    return world
