import numpy as np
from django.test import SimpleTestCase

from . import tensor as ad
from .exceptions import NonFiniteError, ShapeError, TapeError
from .gradcheck import numerical_gradient, relative_error
from .tensor import GradientTape, Tensor


class TensorConstructionTests(SimpleTestCase):
    def test_shape_matches_value_count(self):
        t = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        self.assertEqual(t.shape, (2, 3))
        self.assertEqual(t.size, 6)

    def test_rejects_non_finite_values(self):
        with self.assertRaises(NonFiniteError):
            Tensor([1.0, np.nan])
        with self.assertRaises(NonFiniteError):
            Tensor([np.inf])

    def test_rejects_empty(self):
        with self.assertRaises(ShapeError):
            Tensor([])

    def test_constants_are_immutable(self):
        t = Tensor([1.0, 2.0])
        with self.assertRaises(ValueError):
            t.values[0] = 3.0
        with self.assertRaises(TapeError):
            t.assign([3.0, 4.0])


class PrimitiveOpTests(SimpleTestCase):
    def test_log_sigmoid_at_zero(self):
        self.assertAlmostEqual(ad.log_sigmoid(Tensor(0.0)).item(), -0.6931471805599453, places=15)

    def test_log_sigmoid_is_stable_for_large_arguments(self):
        values = ad.log_sigmoid(Tensor([-1000.0, 1000.0])).values
        self.assertAlmostEqual(values[0], -1000.0)
        self.assertEqual(values[1], -0.0)

    def test_sigmoid_minus_one(self):
        self.assertAlmostEqual(ad.sigmoid(Tensor(-1.0)).item(), 0.2689414213699951, places=15)

    def test_identity_matmul(self):
        v = Tensor([0.3, -1.2, 2.5])
        out = ad.matmul(Tensor(np.eye(3)), v)
        np.testing.assert_array_equal(out.values, v.values)

    def test_matmul_inner_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_elementwise_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_scalar_broadcast(self):
        out = ad.multiply(Tensor([[1.0, 2.0], [3.0, 4.0]]), 2.0)
        np.testing.assert_array_equal(out.values, [[2.0, 4.0], [6.0, 8.0]])

    def test_non_finite_result_is_an_error(self):
        big = Tensor([1e200])
        with self.assertRaises(NonFiniteError):
            ad.square(ad.square(big))

    def test_sum_axis_keeps_rank(self):
        out = ad.sum(Tensor(np.ones((3, 4))), axis=1)
        self.assertEqual(out.shape, (3, 1))
        np.testing.assert_array_equal(out.values, np.full((3, 1), 4.0))

    def test_concatenate(self):
        out = ad.concatenate([Tensor(np.zeros((1, 2))), Tensor(np.ones((2, 2)))], axis=0)
        self.assertEqual(out.shape, (3, 2))

    def test_ops_without_tape_are_not_recorded(self):
        x = Tensor([1.0], requires_grad=True)
        y = ad.square(x)
        self.assertTrue(y.requires_grad)
        with GradientTape() as tape:
            z = ad.square(Tensor([2.0]))
        self.assertEqual(tape.operations, [])
        self.assertFalse(z.requires_grad)


class BackwardTests(SimpleTestCase):
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            loss = ad.sum(ad.square(x))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[x.node_id].values, [2.0, 4.0])

    def test_constant_loss_gives_zero_gradients(self):
        w = Tensor([1.0, -1.0], requires_grad=True)
        with GradientTape() as tape:
            tape.watch(w)
            loss = ad.sum(Tensor([3.0, 4.0]))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[w.node_id].values, [0.0, 0.0])

    def test_unused_leaf_gets_zero_gradient(self):
        used = Tensor([2.0], requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        with GradientTape() as tape:
            tape.watch(unused)
            loss = ad.sum(ad.square(used))
        grads = tape.backward(loss)
        self.assertEqual(grads[unused.node_id].shape, (2, 2))
        self.assertFalse(np.any(grads[unused.node_id].values))

    def test_gradient_has_leaf_shape(self):
        w = Tensor(np.ones((3, 2)), requires_grad=True)
        with GradientTape() as tape:
            loss = ad.mean(ad.matmul(Tensor(np.ones((4, 3))), w))
        self.assertEqual(tape.backward(loss)[w.node_id].shape, (3, 2))

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with GradientTape() as tape:
            y = ad.square(x)
        with self.assertRaises(ShapeError):
            tape.backward(y)

    def test_tape_consumed_once(self):
        x = Tensor([1.0], requires_grad=True)
        with GradientTape() as tape:
            loss = ad.sum(ad.square(x))
        tape.backward(loss)
        with self.assertRaises(TapeError):
            tape.backward(loss)

    def test_unrecorded_loss_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        loss = ad.sum(ad.square(x))
        with GradientTape() as tape:
            pass
        with self.assertRaises(TapeError):
            tape.backward(loss)

    def test_log_sigmoid_of_dot_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=4), requires_grad=True)
        x = Tensor(rng.normal(size=4))

        def loss_fn():
            return ad.log_sigmoid(ad.matmul(w, x))

        with GradientTape() as tape:
            loss = loss_fn()
        analytic = tape.backward(loss)[w.node_id].values
        numeric = numerical_gradient(loss_fn, w, step=1e-5)
        self.assertLess(relative_error(analytic, numeric), 1e-6)

    def test_composite_mlp_expression_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        b1 = Tensor(rng.normal(size=(1, 5)), requires_grad=True)
        w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 3)))
        target = Tensor(rng.normal(size=(4, 2)))
        ones = Tensor(np.ones((4, 1)))

        def loss_fn():
            hidden = ad.silu(ad.add(ad.matmul(x, w1), ad.matmul(ones, b1)))
            err = ad.sum(ad.square(ad.subtract(ad.matmul(hidden, w2), target)), axis=1)
            return ad.mean(ad.log_sigmoid(ad.negate(err)))

        with GradientTape() as tape:
            loss = loss_fn()
        grads = tape.backward(loss)
        for leaf in (w1, b1, w2):
            numeric = numerical_gradient(loss_fn, leaf)
            self.assertLess(relative_error(grads[leaf.node_id].values, numeric), 1e-4)

    def test_shared_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with GradientTape() as tape:
            loss = ad.sum(ad.multiply(x, x) + x)
        self.assertAlmostEqual(tape.backward(loss)[x.node_id].item(), 7.0)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(5)
        w_values = rng.normal(size=(6, 3))
        x = Tensor(rng.normal(size=(8, 6)))
        results = []
        for _ in range(2):
            w = Tensor(w_values, requires_grad=True)
            with GradientTape() as tape:
                loss = ad.mean(ad.log_sigmoid(ad.matmul(x, w)))
            results.append(tape.backward(loss)[w.node_id].values)
        np.testing.assert_array_equal(results[0], results[1])

    def test_concatenate_routes_gradients(self):
        a = Tensor(np.ones((1, 2)), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        with GradientTape() as tape:
            stacked = ad.concatenate([a, b], axis=0)
            loss = ad.sum(ad.multiply(stacked, Tensor([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])))
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads[a.node_id].values, [[1.0, 1.0]])
        np.testing.assert_array_equal(grads[b.node_id].values, [[2.0, 2.0], [3.0, 3.0]])
