"""Central finite differences for checking tape gradients."""

from typing import Callable

import numpy as np

from .tensor import Tensor


def numerical_gradient(loss_fn: Callable[[], Tensor], leaf: Tensor, step: float = 1e-5) -> np.ndarray:
    """d loss_fn() / d leaf by central differences, perturbing ``leaf`` in place.

    ``loss_fn`` is re-evaluated twice per entry and must read the leaf's current
    values; the leaf is restored afterwards.
    """
    original = leaf.numpy()
    grad = np.zeros_like(original)
    flat = original.reshape(-1)
    for index in range(flat.size):
        bumped = flat.copy()
        bumped[index] += step
        leaf.assign(bumped.reshape(original.shape))
        upper = loss_fn().item()
        bumped[index] -= 2.0 * step
        leaf.assign(bumped.reshape(original.shape))
        lower = loss_fn().item()
        grad.reshape(-1)[index] = (upper - lower) / (2.0 * step)
    leaf.assign(original)
    return grad


def relative_error(actual: np.ndarray, expected: np.ndarray, floor: float = 1e-12) -> float:
    """||a - e|| / max(||a||, ||e||, floor) over all entries."""
    actual, expected = np.asarray(actual, dtype=float), np.asarray(expected, dtype=float)
    scale = max(np.linalg.norm(actual), np.linalg.norm(expected), floor)
    return float(np.linalg.norm(actual - expected) / scale)
