"""
Conditional noise-prediction networks.

An ``EpsModel`` maps (z_t, c, t) to a predicted noise. Two architectures share
one forward pass:

- ``mlp``: input [z | time-embedding(t) | condition-embedding(c)] through hidden
  SiLU layers and a zero-initialised output layer.
- ``linear``: a single zero-initialised layer over
  [z (x) time-embedding(t) | time-embedding(t) | condition-embedding(c)], i.e.
  affine in z with time-modulated coefficients. It can represent sigma_t * z
  exactly and keeps every per-time marginal Gaussian, which the closed-form
  oracles rely on.
"""

import hashlib
import logging
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff import tensor as ad
from autodiff.exceptions import ShapeError
from autodiff.tensor import Tensor

from .exceptions import ModelSpecError, ScheduleError, UnknownConditionError
from .process import NULL_CONDITION, Condition

logger = logging.getLogger(__name__)

ARCHITECTURES = ('mlp', 'linear')


def time_embedding(t, dim: int = 8) -> np.ndarray:
    """Sinusoidal features sin(k pi t / 2), cos(k pi t / 2) for k = 1..dim/2, one row per time."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(1, dim // 2 + 1)
    angles = 0.5 * np.pi * t[:, None] * k[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass(frozen=True)
class ModelSpec:
    data_dim: int
    hidden: Tuple[int, ...] = (64, 64)
    architecture: str = 'mlp'
    embed_dim: int = 8

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelSpecError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.data_dim < 1 or self.embed_dim < 2 or self.embed_dim % 2:
            raise ModelSpecError(f"need data_dim >= 1 and an even embed_dim >= 2, got {self.data_dim}, {self.embed_dim}")
        if self.architecture == 'linear' and self.hidden:
            object.__setattr__(self, 'hidden', ())
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))

    @property
    def input_dim(self) -> int:
        if self.architecture == 'linear':
            return self.data_dim * self.embed_dim + 2 * self.embed_dim
        return self.data_dim + 2 * self.embed_dim

    @property
    def layer_shapes(self) -> List[Tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.data_dim]
        return list(zip(sizes[:-1], sizes[1:]))


class EpsModel:
    """Noise predictor eps(z; c, t) with a learned condition table.

    Row 0 of the condition table is the null condition used for classifier-free
    guidance. A frozen model's tensors do not require gradients and can never be
    modified.
    """

    def __init__(
        self,
        spec: ModelSpec,
        condition_names: Sequence[str],
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        condition_embeddings: np.ndarray,
        frozen: bool = False,
        schedule_name: str = 'cosine',
    ):
        names = [NULL_CONDITION] + [name for name in condition_names if name != NULL_CONDITION]
        if len(set(names)) != len(names):
            raise ModelSpecError("condition names must be unique")
        if len(weights) != len(spec.layer_shapes) or len(biases) != len(weights):
            raise ShapeError("parameter count does not match the model spec")
        for (n_in, n_out), weight, bias in zip(spec.layer_shapes, weights, biases):
            if np.shape(weight) != (n_in, n_out) or np.shape(bias) != (1, n_out):
                raise ShapeError(f"expected layer {(n_in, n_out)}, got {np.shape(weight)}")
        if np.shape(condition_embeddings) != (len(names), spec.embed_dim):
            raise ShapeError("condition table does not match the condition names")

        trainable = not frozen
        self.spec = spec
        self.condition_names = names
        self.weights = [Tensor(w, requires_grad=trainable) for w in weights]
        self.biases = [Tensor(b, requires_grad=trainable) for b in biases]
        self.condition_embeddings = Tensor(condition_embeddings, requires_grad=trainable)
        self.frozen = frozen
        self.schedule_name = schedule_name

    @classmethod
    def initialize(
        cls,
        spec: ModelSpec,
        condition_names: Sequence[str],
        seed: int = 0,
        schedule_name: str = 'cosine',
    ) -> 'EpsModel':
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        shapes = spec.layer_shapes
        for index, (n_in, n_out) in enumerate(shapes):
            if index == len(shapes) - 1:
                weights.append(np.zeros((n_in, n_out)))
            else:
                weights.append(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)))
            biases.append(np.zeros((1, n_out)))
        n_conditions = 1 + len([c for c in condition_names if c != NULL_CONDITION])
        table = rng.normal(0.0, 1.0, size=(n_conditions, spec.embed_dim))
        return cls(spec, condition_names, weights, biases, table, schedule_name=schedule_name)

    @property
    def data_dim(self) -> int:
        return self.spec.data_dim

    def parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            named.append((f'layers.{index}.weight', weight))
            named.append((f'layers.{index}.bias', bias))
        named.append(('conditions', self.condition_embeddings))
        return named

    def trainable_parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.parameters() if tensor.requires_grad]

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update('|'.join(self.condition_names).encode())
        for name, tensor in self.parameters():
            digest.update(name.encode())
            digest.update(np.asarray(tensor.shape, dtype='<i8').tobytes())
            digest.update(tensor.values.astype('<f8').tobytes())
        return digest.hexdigest()

    def _copy(self, frozen: bool) -> 'EpsModel':
        return EpsModel(
            self.spec,
            self.condition_names,
            [w.numpy() for w in self.weights],
            [b.numpy() for b in self.biases],
            self.condition_embeddings.numpy(),
            frozen=frozen,
            schedule_name=self.schedule_name,
        )

    def freeze(self) -> 'EpsModel':
        """A frozen copy; the receiver is left untouched."""
        return self if self.frozen else self._copy(frozen=True)

    def trainable_copy(self) -> 'EpsModel':
        return self._copy(frozen=False)

    # -- conditions ---------------------------------------------------------

    def condition_index(self, condition: Condition) -> int:
        name = NULL_CONDITION if condition is None else condition
        try:
            return self.condition_names.index(name)
        except ValueError:
            raise UnknownConditionError(f"unknown condition {name!r}") from None

    def condition_embedding(self, condition: Condition) -> np.ndarray:
        """The embedding vector a condition resolves to (vectors pass through)."""
        if isinstance(condition, np.ndarray):
            return np.asarray(condition, dtype=np.float64).reshape(-1)
        return self.condition_embeddings.values[self.condition_index(condition)].copy()

    def condition_rows(
        self,
        conditions: Sequence[Condition],
        extra: Optional[Mapping[str, Tensor]] = None,
    ) -> Tensor:
        """(n, embed_dim) condition embeddings; ``extra`` adds learned token rows."""
        extra = dict(extra or {})
        names = self.condition_names + list(extra)
        index = {name: i for i, name in enumerate(names)}
        embed_dim = self.spec.embed_dim
        onehot = np.zeros((len(conditions), len(names)))
        vectors = np.zeros((len(conditions), embed_dim))
        has_vectors = False
        for row, condition in enumerate(conditions):
            if isinstance(condition, np.ndarray):
                vector = np.asarray(condition, dtype=np.float64).reshape(-1)
                if vector.shape != (embed_dim,):
                    raise ShapeError(f"condition vector must have {embed_dim} entries")
                vectors[row] = vector
                has_vectors = True
                continue
            name = NULL_CONDITION if condition is None else condition
            if name not in index:
                raise UnknownConditionError(f"unknown condition {name!r}")
            onehot[row, index[name]] = 1.0

        table = self.condition_embeddings
        if extra:
            table = ad.concatenate([table] + list(extra.values()), axis=0)
        rows = ad.matmul(Tensor(onehot), table)
        if has_vectors:
            rows = ad.add(rows, Tensor(vectors))
        return rows

    # -- forward pass -------------------------------------------------------

    def input_features(self, z: np.ndarray, t: np.ndarray) -> np.ndarray:
        temb = time_embedding(t, self.spec.embed_dim)
        if self.spec.architecture == 'linear':
            modulated = (z[:, :, None] * temb[:, None, :]).reshape(z.shape[0], -1)
            return np.concatenate([modulated, temb], axis=1)
        return np.concatenate([z, temb], axis=1)

    def forward(
        self,
        z,
        conditions,
        t,
        weight_deltas: Optional[Mapping[int, Tensor]] = None,
        extra_conditions: Optional[Mapping[str, Tensor]] = None,
    ) -> Tensor:
        """Batched prediction recorded on the active tape.

        ``z`` is (n, d); ``conditions`` is one condition or a list of n; ``t`` is a
        scalar or n times. ``weight_deltas`` maps layer index to an additive
        weight residual (adapters).
        """
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = z.shape[0]
        if z.shape[1] != self.data_dim:
            raise ShapeError(f"latent has {z.shape[1]} dims, model expects {self.data_dim}")
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if not np.all((t >= 0.0) & (t <= 1.0)):
            raise ScheduleError(f"time must lie in [0, 1], got {t}")
        if t.shape[0] == 1 and n > 1:
            t = np.repeat(t, n)
        if t.shape[0] != n:
            raise ShapeError(f"{t.shape[0]} times for {n} latents")
        if isinstance(conditions, (str, np.ndarray)) or conditions is None:
            conditions = [conditions] * n
        if len(conditions) != n:
            raise ShapeError(f"{len(conditions)} conditions for {n} latents")

        cond_rows = self.condition_rows(conditions, extra_conditions)
        hidden = ad.concatenate([Tensor(self.input_features(z, t)), cond_rows], axis=1)
        ones = Tensor(np.ones((n, 1)))
        deltas = weight_deltas or {}
        last = len(self.weights) - 1
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            if index in deltas:
                weight = ad.add(weight, deltas[index])
            hidden = ad.add(ad.matmul(hidden, weight), ad.matmul(ones, bias))
            if index < last:
                hidden = ad.silu(hidden)
        return hidden

    def predict(self, z, c, t) -> np.ndarray:
        """Plain numpy prediction; a single latent vector returns a single vector."""
        single = np.asarray(z).ndim == 1
        out = self.forward(z, c, t).numpy()
        return out[0] if single else out

    def __repr__(self):
        state = 'frozen' if self.frozen else 'trainable'
        return f"EpsModel({self.spec.architecture}, hidden={self.spec.hidden}, {state})"


def predict_eps(model, z, c, t) -> np.ndarray:
    """eps_hat(z; c, t); None or the null id selects the unconditional branch."""
    return model.predict(z, c, t)


def affine_coefficients(model, c, t, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """(A, b) with eps_hat(z; c, t) = A z + b, read off at z = 0 and the unit vectors.

    Only meaningful for predictors that are affine in z (the linear architecture
    and adapters attached to it).
    """
    points = np.vstack([np.zeros(dim), np.eye(dim)])
    out = model.predict(points, c, np.full(dim + 1, float(t)))
    offset = out[0]
    return (out[1:] - offset).T, offset

