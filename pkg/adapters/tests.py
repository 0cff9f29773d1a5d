import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from autodiff.tensor import Tensor
from diffusion.networks import EpsModel, ModelSpec

from .exceptions import AdapterError
from .lora import (
    LoraAdapter,
    MergeSpec,
    TokenEmbedding,
    adapter_alignment,
    attach,
    load_adapter,
    merge,
    save_adapter,
)


def base_model(seed=0, architecture='mlp'):
    spec = ModelSpec(data_dim=2, hidden=(12, 10), architecture=architecture)
    model = EpsModel.initialize(spec, ['dog', 'cat'], seed=seed)
    rng = np.random.default_rng(seed + 50)
    model.weights[-1].assign(rng.normal(0.0, 0.3, size=model.weights[-1].shape))
    return model.freeze()


def randomized(adapter, seed):
    rng = np.random.default_rng(seed)
    for _, tensor in adapter.parameters():
        tensor.assign(rng.normal(0.0, 0.5, size=tensor.shape))
    return adapter


def outputs(model, c='dog'):
    rng = np.random.default_rng(99)
    return model.predict(rng.normal(size=(6, 2)), c, rng.uniform(0.05, 0.95, size=6))


class AttachTests(SimpleTestCase):
    def test_fresh_adapter_is_a_no_op(self):
        base = base_model()
        adapted = attach(base, LoraAdapter.initialize(base, rank=4, seed=1))
        np.testing.assert_array_equal(outputs(adapted), outputs(base))

    def test_zero_scale_is_a_no_op(self):
        base = base_model()
        adapter = randomized(LoraAdapter.initialize(base, rank=4, scale=0.0), seed=2)
        np.testing.assert_array_equal(outputs(attach(base, adapter)), outputs(base))

    def test_random_adapter_changes_predictions(self):
        base = base_model()
        adapter = randomized(LoraAdapter.initialize(base, rank=4), seed=2)
        self.assertFalse(np.array_equal(outputs(attach(base, adapter)), outputs(base)))

    def test_rank_clamped_to_layer(self):
        base = base_model()
        ranks = LoraAdapter.initialize(base, rank=32).ranks
        self.assertEqual(ranks, {0: 12, 1: 10, 2: 2})

    def test_initial_delta_is_zero(self):
        adapter = LoraAdapter.initialize(base_model(), rank=4, seed=3)
        for index in adapter.layers:
            self.assertFalse(np.any(adapter.delta(index)))

    def test_rank_above_layer_rejected(self):
        with self.assertRaises(AdapterError):
            LoraAdapter({0: (np.zeros((3, 4)), np.zeros((4, 2)))})

    def test_shape_mismatch_rejected(self):
        other = EpsModel.initialize(ModelSpec(data_dim=3, hidden=(12, 10)), ['dog'], seed=0)
        with self.assertRaises(AdapterError):
            attach(base_model(), LoraAdapter.initialize(other, rank=2))

    def test_only_adapter_and_tokens_train(self):
        base = base_model()
        adapter = LoraAdapter.initialize(base, rank=2)
        token = TokenEmbedding.from_initializer(base, 'sks', 'dog')
        adapted = attach(base, adapter, [token])
        self.assertEqual(len(adapted.trainable_parameters()), 2 * len(adapter.layers) + 1)
        frozen_token = attach(base, adapter, [token], train_embedding=False)
        self.assertNotIn(token.vector, frozen_token.trainable_parameters())

    def test_base_untouched_by_adapter_updates(self):
        base = base_model()
        before = base.checksum()
        adapted = attach(base, LoraAdapter.initialize(base, rank=3))
        randomized(adapted.adapter, seed=4)
        outputs(adapted)
        self.assertEqual(base.checksum(), before)

    def test_full_rank_fits_any_residual(self):
        base = base_model(architecture='linear')
        adapter = LoraAdapter.initialize(base, rank=64, seed=5)
        n, m = adapter.layer_shapes[0]
        self.assertEqual(adapter.ranks[0], min(n, m))
        target = np.random.default_rng(6).normal(size=(n, m))
        A, B = (t.numpy() for t in adapter.layers[0])
        for _ in range(3):
            B = np.linalg.lstsq(A, target, rcond=None)[0]
            A = np.linalg.lstsq(B.T, target.T, rcond=None)[0].T
        adapter.layers[0][0].assign(A)
        adapter.layers[0][1].assign(B)
        self.assertLess(np.mean((adapter.delta(0) - target) ** 2), 1e-6)


class TokenTests(SimpleTestCase):
    def test_initialised_from_existing_condition(self):
        base = base_model()
        token = TokenEmbedding.from_initializer(base, 'sks', 'dog')
        np.testing.assert_array_equal(token.vector.values.reshape(-1), base.condition_embedding('dog'))
        adapted = attach(base, LoraAdapter.initialize(base, rank=2), [token])
        np.testing.assert_array_equal(outputs(adapted, 'sks'), outputs(base, 'dog'))

    def test_clash_rejected(self):
        base = base_model()
        with self.assertRaises(AdapterError):
            attach(base, LoraAdapter.initialize(base, rank=2), [TokenEmbedding('cat', np.zeros(8))])

    def test_unknown_initializer(self):
        with self.assertRaises(AdapterError):
            TokenEmbedding.from_initializer(base_model(), 'sks', 'horse')


class MergeTests(SimpleTestCase):
    def setUp(self):
        self.base = base_model()
        self.first = randomized(LoraAdapter.initialize(self.base, rank=2, seed=1), seed=11)
        self.second = randomized(LoraAdapter.initialize(self.base, rank=2, seed=2), seed=12)

    def test_zero_coefficient_drops_term(self):
        merged = merge(MergeSpec(((self.first, 1.0), (self.second, 0.0))))
        for index in self.first.layers:
            np.testing.assert_array_equal(merged.delta(index), self.first.delta(index))

    def test_sum_of_deltas(self):
        merged = merge(MergeSpec(((self.first, 1.0), (self.second, 1.0))))
        for index in self.first.layers:
            expected = self.first.delta(index) + self.second.delta(index)
            np.testing.assert_allclose(merged.delta(index), expected, rtol=0, atol=1e-12)
        self.assertEqual(merged.ranks[0], 4)

    def test_negation_cancels(self):
        negated = LoraAdapter({i: (-A.values, B.values) for i, (A, B) in self.first.layers.items()})
        merged = merge(MergeSpec(((self.first, 1.0), (negated, 1.0))))
        for index in merged.layers:
            np.testing.assert_allclose(merged.delta(index), 0.0, atol=1e-12)

    def test_linearity(self):
        for alpha, beta in ((0.5, 2.0), (-1.0, 0.25), (3.0, -0.7)):
            merged = merge(MergeSpec(((self.first, alpha), (self.second, beta))))
            for index in merged.layers:
                expected = alpha * self.first.delta(index) + beta * self.second.delta(index)
                np.testing.assert_allclose(merged.delta(index), expected, rtol=0, atol=1e-12)

    def test_attached_merge_matches_dense_delta(self):
        merged = merge(MergeSpec(((self.first, 1.0), (self.second, 1.0))))
        dense = {
            index: Tensor(self.first.delta(index) + self.second.delta(index))
            for index in self.first.layers
        }
        rng = np.random.default_rng(3)
        z, t = rng.normal(size=(5, 2)), rng.uniform(0.1, 0.9, size=5)
        direct = self.base.forward(z, 'cat', t, weight_deltas=dense).numpy()
        np.testing.assert_allclose(attach(self.base, merged).predict(z, 'cat', t), direct, rtol=0, atol=1e-10)

    def test_incompatible_layers_rejected(self):
        partial = LoraAdapter.initialize(self.base, rank=2, targets=[0])
        with self.assertRaises(AdapterError):
            merge(MergeSpec(((self.first, 1.0), (partial, 1.0))))


class AlignmentTests(SimpleTestCase):
    def test_self_alignment_is_one(self):
        adapter = randomized(LoraAdapter.initialize(base_model(), rank=2), seed=7)
        for value in adapter_alignment(adapter, adapter).values():
            self.assertAlmostEqual(value, 1.0, places=12)

    def test_orthogonal_columns(self):
        e0, e1 = np.eye(4)[:, :1], np.eye(4)[:, 1:2]
        a = LoraAdapter({0: (e0, np.ones((1, 3)))})
        b = LoraAdapter({0: (e1, np.ones((1, 3)))})
        self.assertEqual(adapter_alignment(a, b), {0: 0.0})

    def test_zero_columns_count_as_zero(self):
        a = LoraAdapter({0: (np.ones((4, 1)), np.array([[1.0, 0.0]]))})
        self.assertEqual(adapter_alignment(a, a), {0: 0.5})

    def test_rank_one_brute_force(self):
        rng = np.random.default_rng(8)
        a = LoraAdapter({0: (rng.normal(size=(5, 1)), rng.normal(size=(1, 3)))})
        b = LoraAdapter({0: (rng.normal(size=(5, 1)), rng.normal(size=(1, 3)))})
        da, db = a.delta(0), b.delta(0)
        cosines = []
        for j in range(3):
            u, v = da[:, j], db[:, j]
            cosines.append(sum(p * q for p, q in zip(u, v)) / np.sqrt(sum(p * p for p in u) * sum(q * q for q in v)))
        self.assertAlmostEqual(adapter_alignment(a, b)[0], np.mean(cosines), delta=1e-12)

    def test_different_layers_rejected(self):
        with self.assertRaises(AdapterError):
            adapter_alignment(LoraAdapter({0: (np.ones((4, 1)), np.ones((1, 2)))}),
                              LoraAdapter({1: (np.ones((4, 1)), np.ones((1, 2)))}))


class PersistenceTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'adapter.dcl'

    def test_round_trip_is_bit_exact(self):
        base = base_model()
        adapter = randomized(LoraAdapter.initialize(base, rank=3, scale=0.75), seed=9)
        token = TokenEmbedding.from_initializer(base, 'sks', 'dog')
        save_adapter(adapter, self.path, [token], base_checksum=base.checksum())
        loaded, tokens = load_adapter(self.path, base)
        self.assertEqual(loaded.scale, 0.75)
        self.assertEqual(loaded.ranks, adapter.ranks)
        for (name, a), (_, b) in zip(adapter.parameters(), loaded.parameters()):
            self.assertEqual(a.values.tobytes(), b.values.tobytes(), name)
        self.assertEqual(tokens[0].token, 'sks')
        self.assertEqual(tokens[0].initializer, 'dog')
        self.assertEqual(tokens[0].vector.values.tobytes(), token.vector.values.tobytes())

    def test_mismatched_base_only_warns(self):
        base = base_model()
        save_adapter(LoraAdapter.initialize(base, rank=2), self.path, base_checksum=base.checksum())
        with self.assertLogs('adapters.lora', level='WARNING'):
            adapter, _ = load_adapter(self.path, base_model(seed=1))
        self.assertEqual(adapter.ranks, {0: 2, 1: 2, 2: 2})
