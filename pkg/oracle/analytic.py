"""
Closed-form Gaussian oracles.

Exact optimal noise predictors for Gaussian-mixture worlds, Gaussian KLs, the
exponential tilt of a Gaussian by a quadratic consistency function, and the
exact deviation between two noise predictors that are affine in the latent.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg, special

from diffusion.networks import affine_coefficients
from diffusion.schedules import NoiseSchedule, midpoint_grid

from .exceptions import OracleError
from .worlds import GaussianConceptWorld

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise OracleError(f"covariance {cov.shape} does not match mean of {mean.shape[0]} dims")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'cov', cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _cholesky(matrix: np.ndarray, what: str):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError:
        raise OracleError(f"{what} is not positive-definite") from None


def _log_det(factor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


def marginal_components(world: GaussianConceptWorld, c, t, sched: NoiseSchedule) -> List[Tuple[float, Gaussian]]:
    """(log weight, N(alpha_t mu, alpha_t^2 Sigma + sigma_t^2 I)) per mixture component of q(z_t | c)."""
    alpha, sigma = float(sched.alpha(t)), float(sched.sigma(t))
    eye = np.eye(world.dim)
    return [
        (np.log(comp.weight), Gaussian(alpha * comp.mean, alpha ** 2 * comp.cov + sigma ** 2 * eye))
        for comp in world.components(c)
    ]


def _component_terms(world, z, c, t, sched):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    log_terms, solved = [], []
    for log_weight, marginal in marginal_components(world, c, t, sched):
        factor = _cholesky(marginal.cov, f"marginal covariance of {c!r}")
        centred = z - marginal.mean
        v = linalg.cho_solve(factor, centred.T).T
        quad = np.sum(centred * v, axis=1)
        log_terms.append(log_weight - 0.5 * (quad + _log_det(factor) + world.dim * np.log(2 * np.pi)))
        solved.append(v)
    return np.stack(log_terms), solved


def marginal_log_density(world: GaussianConceptWorld, z, c, t, sched: NoiseSchedule) -> np.ndarray:
    """log q(z_t | c) for each row of ``z``."""
    log_terms, _ = _component_terms(world, z, c, t, sched)
    return special.logsumexp(log_terms, axis=0)


def optimal_eps(world: GaussianConceptWorld, z, c, t, sched: NoiseSchedule) -> np.ndarray:
    """The minimum-MSE noise prediction E[eps | z_t = z, c] = -sigma_t * grad log q(z_t | c).

    For a single component this is sigma_t (alpha_t^2 Sigma + sigma_t^2 I)^-1 (z - alpha_t mu);
    mixtures weight the per-component terms by their posterior responsibilities.
    """
    single = np.asarray(z).ndim == 1
    log_terms, solved = _component_terms(world, z, c, t, sched)
    resp = np.exp(log_terms - special.logsumexp(log_terms, axis=0))
    eps = float(sched.sigma(t)) * sum(r[:, None] * v for r, v in zip(resp, solved))
    return eps[0] if single else eps


def gaussian_kl(m1, S1, m2, S2) -> float:
    """KL(N(m1, S1) || N(m2, S2))."""
    m1, m2 = np.asarray(m1, dtype=np.float64).reshape(-1), np.asarray(m2, dtype=np.float64).reshape(-1)
    S1, S2 = np.atleast_2d(np.asarray(S1, dtype=np.float64)), np.atleast_2d(np.asarray(S2, dtype=np.float64))
    d = m1.shape[0]
    if m2.shape[0] != d or S1.shape != (d, d) or S2.shape != (d, d):
        raise OracleError("gaussian_kl arguments disagree on the dimension")
    f1 = _cholesky(S1, "first covariance")
    f2 = _cholesky(S2, "second covariance")
    diff = m2 - m1
    trace = float(np.trace(linalg.cho_solve(f2, S1)))
    mahalanobis = float(diff @ linalg.cho_solve(f2, diff))
    kl = 0.5 * (trace + mahalanobis - d + _log_det(f2) - _log_det(f1))
    return max(kl, 0.0)


@dataclass(frozen=True)
class ConsistencyFunction:
    """f(x) = x^T Q x + b^T x + k."""

    Q: np.ndarray
    b: np.ndarray
    k: float = 0.0

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if Q.shape != (b.shape[0], b.shape[0]):
            raise OracleError("Q and b disagree on the dimension")
        if not np.allclose(Q, Q.T, atol=1e-12):
            raise OracleError("Q must be symmetric")
        object.__setattr__(self, 'Q', Q)
        object.__setattr__(self, 'b', b)
        object.__setattr__(self, 'k', float(self.k))

    @classmethod
    def zero(cls, dim: int) -> 'ConsistencyFunction':
        return cls(np.zeros((dim, dim)), np.zeros(dim))

    @classmethod
    def toward(cls, target, scale: float = 1.0) -> 'ConsistencyFunction':
        """-scale * ||x - target||^2: rewards closeness to ``target``."""
        target = np.asarray(target, dtype=np.float64).reshape(-1)
        dim = target.shape[0]
        return cls(-scale * np.eye(dim), 2.0 * scale * target, -scale * float(target @ target))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.einsum('ni,ij,nj->n', x, self.Q, x) + x @ self.b + self.k

    def expectation(self, dist: Gaussian) -> float:
        m = dist.mean
        return float(np.trace(self.Q @ dist.cov) + m @ self.Q @ m + self.b @ m + self.k)


@dataclass(frozen=True)
class TiltResult:
    gaussian: Gaussian
    log_normalizer: float
    expected_consistency: float

    def kl_to_base(self, beta: float) -> float:
        """KL(p* || p) = E_p*[f] / beta - log Z."""
        return self.expected_consistency / beta - self.log_normalizer


def tilted_distribution(base: Gaussian, f: ConsistencyFunction, beta: float) -> TiltResult:
    """The optimum p* of E[f] - beta KL(p || base), i.e. p* = base * exp(f / beta) / Z."""
    if not beta > 0:
        raise OracleError(f"beta must be positive, got {beta}")
    if f.b.shape[0] != base.dim:
        raise OracleError("consistency function and base disagree on the dimension")
    base_factor = _cholesky(base.cov, "base covariance")
    base_precision = linalg.cho_solve(base_factor, np.eye(base.dim))
    base_shift = base_precision @ base.mean

    precision = base_precision - 2.0 * f.Q / beta
    precision = 0.5 * (precision + precision.T)
    factor = _cholesky(precision, f"tilted precision at beta={beta}")
    shift = base_shift + f.b / beta
    mean = linalg.cho_solve(factor, shift)
    cov = linalg.cho_solve(factor, np.eye(base.dim))
    cov = 0.5 * (cov + cov.T)

    log_z = (
        0.5 * float(shift @ mean)
        - 0.5 * float(base.mean @ base_shift)
        + f.k / beta
        - 0.5 * _log_det(factor)
        - 0.5 * _log_det(base_factor)
    )
    tilted = Gaussian(mean, cov)
    return TiltResult(tilted, log_z, f.expectation(tilted))


# -- affine noise predictors ------------------------------------------------

def residual_moments(A, b, x, t, sched: NoiseSchedule) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of eps_hat - eps over eps ~ N(0, I) when eps_hat(z) = A z + b."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    alpha, sigma = float(sched.alpha(t)), float(sched.sigma(t))
    noise_map = sigma * A - np.eye(A.shape[0])
    return alpha * A @ x + np.asarray(b, dtype=np.float64), noise_map @ noise_map.T


def expected_eps_error(A, b, x, t, sched: NoiseSchedule) -> float:
    """E_eps ||eps_hat(z_t) - eps||^2 for an affine predictor."""
    mean, cov = residual_moments(A, b, x, t, sched)
    return float(mean @ mean + np.trace(cov))


def kl_rate(A, b, x, t, sched: NoiseSchedule) -> float:
    """-1/2 lambda'_t E||eps_hat - eps||^2, the per-time rate of the diffusion KL bound (>= 0)."""
    return float(-0.5 * sched.d_log_snr(t) * expected_eps_error(A, b, x, t, sched))


def affine_deviation(
    theta,
    phi,
    x,
    c,
    sched: NoiseSchedule,
    grid_size: int = 64,
    weighted: bool = False,
    phi_condition=None,
) -> float:
    """Exact deviation of ``theta`` from ``phi`` at (x, c) on the midpoint grid.

    Both predictors must be affine in the latent. The result is the grid average
    of the KL-rate difference rate_phi - rate_theta (positive when theta fits x
    better), optionally weighted by w_t.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    dim = x.shape[0]
    phi_condition = c if phi_condition is None else phi_condition
    terms = []
    for t in midpoint_grid(grid_size):
        A_theta, b_theta = affine_coefficients(theta, c, t, dim)
        A_phi, b_phi = affine_coefficients(phi, phi_condition, t, dim)
        term = kl_rate(A_phi, b_phi, x, t, sched) - kl_rate(A_theta, b_theta, x, t, sched)
        if weighted:
            term *= float(sched.weight(t))
        terms.append(term)
    return float(np.mean(terms))


def denoising_step_kl(x, eps, eps_hat, t: float, s: float, sched: NoiseSchedule) -> float:
    """KL(q(z_s | z_t, x) || p(z_s | z_t)) for s < t, with z_t = alpha_t x + sigma_t eps.

    The model posterior plugs x_hat = (z_t - sigma_t eps_hat) / alpha_t into the
    forward posterior. As s -> t the KL divided by (t - s) tends to
    -1/2 lambda'_t ||eps_hat - eps||^2.
    """
    if not 0.0 <= s < t <= 1.0:
        raise OracleError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    eps_hat = np.asarray(eps_hat, dtype=np.float64).reshape(-1)
    alpha_t, sigma_t = float(sched.alpha(t)), float(sched.sigma(t))
    alpha_s, sigma_s = float(sched.alpha(s)), float(sched.sigma(s))
    alpha_ts = alpha_t / alpha_s
    var_ts = sigma_t ** 2 - alpha_ts ** 2 * sigma_s ** 2
    if not var_ts > 0:
        raise OracleError(f"step {s} -> {t} is too short to resolve")

    z_t = alpha_t * x + sigma_t * eps
    x_hat = (z_t - sigma_t * eps_hat) / alpha_t
    z_coef = alpha_ts * sigma_s ** 2 / sigma_t ** 2
    x_coef = alpha_s * var_ts / sigma_t ** 2
    var = var_ts * sigma_s ** 2 / sigma_t ** 2
    cov = var * np.eye(x.shape[0])
    return gaussian_kl(z_coef * z_t + x_coef * x, cov, z_coef * z_t + x_coef * x_hat, cov)
