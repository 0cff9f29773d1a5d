"""Adam over tape leaves, with one learning rate per parameter group."""

from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor

from .exceptions import FrozenModelError, TrainingDivergedError, TrainingError


class Adam:
    """Bias-corrected Adam.

    ``param_groups`` is a list of ``{'params': [...], 'lr': float}`` dicts; a
    parameter may belong to one group only.
    """

    def __init__(
        self,
        param_groups: Sequence[Mapping],
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        beta1, beta2 = betas
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise TrainingError(f"Adam betas must lie in [0, 1), got {betas}")
        if not eps > 0:
            raise TrainingError(f"Adam eps must be positive, got {eps}")
        self.betas = (float(beta1), float(beta2))
        self.eps = float(eps)
        self.param_groups: List[Dict] = []
        seen = set()
        for group in param_groups:
            params = list(group['params'])
            lr = float(group['lr'])
            if not lr > 0:
                raise TrainingError(f"learning rate must be positive, got {lr}")
            for param in params:
                if not param.requires_grad:
                    raise FrozenModelError("optimizer was handed a frozen parameter")
                if param.node_id in seen:
                    raise TrainingError("parameter listed in two groups")
                seen.add(param.node_id)
            if params:
                self.param_groups.append({'params': params, 'lr': lr})
        if not self.param_groups:
            raise TrainingError("optimizer has no parameters")
        self.state: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    @property
    def params(self) -> List[Tensor]:
        return [p for group in self.param_groups for p in group['params']]

    def step(self, grads: Mapping[int, object]) -> None:
        """Apply one update; parameters missing from ``grads`` get a zero gradient."""
        beta1, beta2 = self.betas
        self.step_count += 1
        correction1 = 1.0 - beta1 ** self.step_count
        correction2 = 1.0 - beta2 ** self.step_count
        for group in self.param_groups:
            lr = group['lr']
            for param in group['params']:
                grad = grads.get(param.node_id)
                grad = np.zeros(param.shape) if grad is None else np.asarray(getattr(grad, 'values', grad))
                if not np.all(np.isfinite(grad)):
                    raise TrainingDivergedError("non-finite gradient", step=self.step_count)
                m, v = self.state.get(param.node_id, (np.zeros(param.shape), np.zeros(param.shape)))
                m = beta1 * m + (1.0 - beta1) * grad
                v = beta2 * v + (1.0 - beta2) * grad * grad
                self.state[param.node_id] = (m, v)
                m_hat = m / correction1
                v_hat = v / correction2
                param.assign(param.values - lr * m_hat / (np.sqrt(v_hat) + self.eps))
