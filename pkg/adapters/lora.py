"""
Low-rank adapters, learned condition tokens and arithmetic merging.

A ``LoraAdapter`` holds one factor pair (A: n x r, B: r x m) per wrapped weight
matrix and adds ``scale * A @ B`` to it. ``attach`` wraps a frozen base model
so that only the adapter factors (and any new tokens) are trainable.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff import tensor as ad
from autodiff.tensor import Tensor
from diffusion.checkpoints import load_container, save_container
from diffusion.exceptions import UnknownConditionError
from diffusion.networks import EpsModel
from diffusion.process import NULL_CONDITION, Condition

from .exceptions import AdapterError

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class LoraAdapter:
    """Per-layer residuals scale * A_i @ B_i, keyed by layer index."""

    def __init__(
        self,
        factors: Mapping[int, Tuple[np.ndarray, np.ndarray]],
        scale: float = 1.0,
        merged: bool = False,
    ):
        if not factors:
            raise AdapterError("an adapter wraps at least one layer")
        if not np.isfinite(scale):
            raise AdapterError(f"adapter scale must be finite, got {scale}")
        self.layers: Dict[int, Tuple[Tensor, Tensor]] = {}
        for index in sorted(factors):
            A, B = (np.atleast_2d(np.asarray(f, dtype=np.float64)) for f in factors[index])
            (n, r), (r_b, m) = A.shape, B.shape
            if r != r_b:
                raise AdapterError(f"layer {index}: A is {A.shape} but B is {B.shape}")
            # merged factors stack the ranks of their terms
            if not merged and r > min(n, m):
                raise AdapterError(f"layer {index}: rank {r} exceeds min({n}, {m})")
            self.layers[index] = (Tensor(A, requires_grad=True), Tensor(B, requires_grad=True))
        self.scale = float(scale)
        self.merged = merged

    @classmethod
    def initialize(
        cls,
        model,
        rank: int,
        seed: int = 0,
        scale: float = 1.0,
        targets: Optional[Sequence[int]] = None,
    ) -> 'LoraAdapter':
        """A ~ N(0, 0.02^2), B = 0, rank clamped to min(n, m) per layer."""
        if rank < 1:
            raise AdapterError(f"rank must be positive, got {rank}")
        shapes = model.spec.layer_shapes
        targets = range(len(shapes)) if targets is None else targets
        rng = np.random.default_rng(seed)
        factors = {}
        for index in targets:
            if not 0 <= index < len(shapes):
                raise AdapterError(f"model has no layer {index}")
            n, m = shapes[index]
            r = min(rank, n, m)
            factors[index] = (rng.normal(0.0, INIT_STD, size=(n, r)), np.zeros((r, m)))
        return cls(factors, scale=scale)

    @property
    def ranks(self) -> Dict[int, int]:
        return {index: A.shape[1] for index, (A, _) in self.layers.items()}

    @property
    def layer_shapes(self) -> Dict[int, Tuple[int, int]]:
        return {index: (A.shape[0], B.shape[1]) for index, (A, B) in self.layers.items()}

    def delta(self, index: int) -> np.ndarray:
        A, B = self.layers[index]
        return self.scale * (A.values @ B.values)

    def deltas(self) -> Dict[int, Tensor]:
        """Tape-recorded residuals for the forward pass."""
        return {
            index: ad.multiply(ad.matmul(A, B), self.scale)
            for index, (A, B) in self.layers.items()
        }

    def parameters(self) -> List[Tuple[str, Tensor]]:
        named = []
        for index, (A, B) in self.layers.items():
            named.append((f'lora.{index}.A', A))
            named.append((f'lora.{index}.B', B))
        return named

    def trainable_parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.parameters()]

    def __repr__(self):
        return f"LoraAdapter(ranks={self.ranks}, scale={self.scale}{', merged' if self.merged else ''})"


class TokenEmbedding:
    """A new condition token whose embedding vector is learned."""

    def __init__(self, token: str, vector, initializer: Optional[str] = None, trainable: bool = True):
        if not token or token == NULL_CONDITION:
            raise AdapterError(f"invalid token name {token!r}")
        self.token = token
        self.initializer = initializer
        self.vector = Tensor(np.asarray(vector, dtype=np.float64).reshape(1, -1), requires_grad=trainable)

    @classmethod
    def from_initializer(cls, model, token: str, initializer: str) -> 'TokenEmbedding':
        """Start from a copy of an existing condition's embedding."""
        try:
            vector = model.condition_embedding(initializer)
        except UnknownConditionError:
            raise AdapterError(f"initializer {initializer!r} is not a condition of the base model") from None
        return cls(token, vector, initializer=initializer)

    def __repr__(self):
        return f"TokenEmbedding({self.token!r}, initializer={self.initializer!r})"


class AdaptedEpsModel:
    """A frozen base model seen through an adapter and optional new tokens.

    Behaves like an ``EpsModel`` for losses, samplers and diagnostics. Only the
    adapter factors, and the token vectors when ``train_embedding`` is set, are
    trainable.
    """

    frozen = False

    def __init__(
        self,
        base: EpsModel,
        adapter: LoraAdapter,
        tokens: Sequence[TokenEmbedding] = (),
        train_embedding: bool = True,
    ):
        shapes = base.spec.layer_shapes
        for index, shape in adapter.layer_shapes.items():
            if index >= len(shapes) or shapes[index] != shape:
                raise AdapterError(f"adapter layer {index} {shape} does not fit the base model")
        self.tokens = {}
        for token in tokens:
            if token.token in base.condition_names or token.token in self.tokens:
                raise AdapterError(f"token {token.token!r} clashes with an existing condition")
            if token.vector.shape != (1, base.spec.embed_dim):
                raise AdapterError(f"token {token.token!r} has the wrong embedding size")
            self.tokens[token.token] = token
        self.base = base.freeze()
        self.adapter = adapter
        self.train_embedding = train_embedding

    @property
    def spec(self):
        return self.base.spec

    @property
    def data_dim(self) -> int:
        return self.base.data_dim

    @property
    def schedule_name(self) -> str:
        return self.base.schedule_name

    @property
    def condition_names(self) -> List[str]:
        return self.base.condition_names + list(self.tokens)

    def condition_embedding(self, condition: Condition) -> np.ndarray:
        if isinstance(condition, str) and condition in self.tokens:
            return self.tokens[condition].vector.values.reshape(-1).copy()
        return self.base.condition_embedding(condition)

    def forward(self, z, conditions, t) -> Tensor:
        extra = {name: token.vector for name, token in self.tokens.items()}
        return self.base.forward(z, conditions, t, weight_deltas=self.adapter.deltas(), extra_conditions=extra)

    def predict(self, z, c, t) -> np.ndarray:
        single = np.asarray(z).ndim == 1
        out = self.forward(z, c, t).numpy()
        return out[0] if single else out

    def parameters(self) -> List[Tuple[str, Tensor]]:
        named = list(self.adapter.parameters())
        named.extend((f'token.{name}', token.vector) for name, token in self.tokens.items())
        return named

    def trainable_parameters(self) -> List[Tensor]:
        params = self.adapter.trainable_parameters()
        if self.train_embedding:
            params.extend(token.vector for token in self.tokens.values() if token.vector.requires_grad)
        return params

    def __repr__(self):
        return f"AdaptedEpsModel({self.base!r}, {self.adapter!r}, tokens={list(self.tokens)})"


def attach(
    model: EpsModel,
    adapter: LoraAdapter,
    tokens: Sequence[TokenEmbedding] = (),
    train_embedding: bool = True,
) -> AdaptedEpsModel:
    """Effective weights W + scale * A @ B over the frozen base."""
    return AdaptedEpsModel(model, adapter, tokens, train_embedding)


@dataclass(frozen=True)
class MergeSpec:
    terms: Tuple[Tuple[LoraAdapter, float], ...]

    def __post_init__(self):
        terms = tuple((adapter, float(coefficient)) for adapter, coefficient in self.terms)
        if not terms:
            raise AdapterError("nothing to merge")
        shapes = terms[0][0].layer_shapes
        for adapter, _ in terms[1:]:
            if adapter.layer_shapes != shapes:
                raise AdapterError("merged adapters must wrap the same layers with the same shapes")
        object.__setattr__(self, 'terms', terms)


def merge(spec: MergeSpec) -> LoraAdapter:
    """An adapter whose delta is sum_i tau_i * delta_i, kept as stacked exact factors.

    For each layer A = [tau_1 s_1 A_1 | tau_2 s_2 A_2 | ...] and B = [B_1; B_2; ...].
    Terms with a zero coefficient or a zero delta are left out.
    """
    factors = {}
    for index, (n, m) in spec.terms[0][0].layer_shapes.items():
        left, right = [], []
        for adapter, coefficient in spec.terms:
            A, B = adapter.layers[index]
            if coefficient == 0.0 or adapter.scale == 0.0 or not np.any(B.values) or not np.any(A.values):
                continue
            left.append(coefficient * adapter.scale * A.values)
            right.append(B.values)
        if left:
            factors[index] = (np.concatenate(left, axis=1), np.concatenate(right, axis=0))
        else:
            factors[index] = (np.zeros((n, 1)), np.zeros((1, m)))
    merged = LoraAdapter(factors, scale=1.0, merged=True)
    logger.debug("merged %d adapters into ranks %s", len(spec.terms), merged.ranks)
    return merged


def adapter_alignment(a: LoraAdapter, b: LoraAdapter) -> Dict[int, float]:
    """Per layer, the mean cosine similarity of matching columns of the two deltas.

    Zero columns contribute 0.
    """
    if a.layer_shapes != b.layer_shapes:
        raise AdapterError("adapters wrap different layers")
    alignment = {}
    for index in a.layers:
        da, db = a.delta(index), b.delta(index)
        norms = np.linalg.norm(da, axis=0) * np.linalg.norm(db, axis=0)
        dots = np.sum(da * db, axis=0)
        cosines = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
        alignment[index] = float(np.mean(cosines))
    return alignment


# -- persistence ----------------------------------------------------------------

def save_adapter(
    adapter: LoraAdapter,
    path,
    tokens: Sequence[TokenEmbedding] = (),
    base_checksum: Optional[str] = None,
) -> str:
    meta = {
        'scale': adapter.scale,
        'merged': adapter.merged,
        'layers': [
            {'index': index, 'rank': rank, 'shape': list(adapter.layer_shapes[index])}
            for index, rank in adapter.ranks.items()
        ],
        'tokens': [{'token': t.token, 'initializer': t.initializer} for t in tokens],
        'base_checksum': base_checksum,
    }
    arrays = {name: tensor.values for name, tensor in adapter.parameters()}
    arrays.update({f'token.{t.token}': t.vector.values for t in tokens})
    return save_container(path, 'adapter', meta, arrays)


def load_adapter(path, base: Optional[EpsModel] = None) -> Tuple[LoraAdapter, List[TokenEmbedding]]:
    """Read an adapter file; a base-model checksum mismatch is only logged."""
    meta, arrays = load_container(path, kind='adapter')
    try:
        factors = {
            entry['index']: (arrays[f"lora.{entry['index']}.A"], arrays[f"lora.{entry['index']}.B"])
            for entry in meta['layers']
        }
        tokens = [
            TokenEmbedding(entry['token'], arrays[f"token.{entry['token']}"], entry['initializer'])
            for entry in meta['tokens']
        ]
    except KeyError as exc:
        raise AdapterError(f"{path}: missing array {exc}") from exc
    adapter = LoraAdapter(factors, scale=meta['scale'], merged=meta['merged'])
    if base is not None and meta.get('base_checksum') and meta['base_checksum'] != base.checksum():
        logger.warning("adapter %s was trained against a different base model", path)
    return adapter, tokens
