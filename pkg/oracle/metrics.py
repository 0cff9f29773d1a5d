"""
Surrogate fidelity metrics.

``consistency_score`` stands in for an image-similarity metric: how close samples
land to the reference set. ``prompt_fidelity`` stands in for an image-text
metric: how plausible samples are under the world's density for the prompt.
"""

from typing import Optional

import numpy as np
from scipy.spatial import distance

from .exceptions import OracleError
from .worlds import GaussianConceptWorld


def _points(values, what: str, dim: Optional[int] = None) -> np.ndarray:
    """(n, d) rows. A 1-D input is one point when ``dim`` > 1 and n scalars when ``dim`` is 1."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1 and dim is not None and dim > 1:
        if array.size != dim:
            raise OracleError(f"{what} holds {array.size} values, not one {dim}-dimensional point")
        array = array[None, :]
    elif array.ndim == 1:
        array = array[:, None] if array.size else array.reshape(0, 1)
    if array.ndim != 2:
        raise OracleError(f"{what} must be a vector or a matrix of rows")
    if dim is not None and array.shape[1] != dim:
        raise OracleError(f"{what} has {array.shape[1]} columns, expected {dim}")
    if array.shape[0] == 0:
        raise OracleError(f"{what} is empty")
    return array


def _shared_dim(*arrays) -> Optional[int]:
    dims = {np.shape(a)[1] for a in arrays if np.ndim(a) == 2}
    if len(dims) > 1:
        raise OracleError(f"inputs disagree on dimension: {sorted(dims)}")
    return dims.pop() if dims else None


def reference_bandwidth(references, dim: Optional[int] = None) -> float:
    """Median pairwise squared distance of the reference set (1.0 when undefined)."""
    references = _points(references, 'reference set', dim)
    if references.shape[0] < 2:
        return 1.0
    median = float(np.median(distance.pdist(references, 'sqeuclidean')))
    return median if median > 0 else 1.0


def consistency_score(samples, references, bandwidth: Optional[float] = None) -> float:
    dim = _shared_dim(samples, references)
    samples = _points(samples, 'sample set', dim)
    references = _points(references, 'reference set', dim)
    if bandwidth is None:
        bandwidth = reference_bandwidth(references)
    nearest = distance.cdist(samples, references, 'sqeuclidean').min(axis=1)
    return float(np.mean(np.exp(-nearest / bandwidth)))


def prompt_fidelity(samples, c: str, world: GaussianConceptWorld) -> float:
    """Mean log q(x | c) rescaled by the world's fidelity band and clipped to [0, 1]."""
    samples = _points(samples, 'sample set', world.dim)
    low, high = world.fidelity_band(c)
    scaled = (world.log_density(samples, c) - low) / (high - low)
    return float(np.mean(np.clip(scaled, 0.0, 1.0)))
