import math
import unittest

import numpy as np

from autodiff import Graph, backward, finite_diff_check, relative_error, tensor2
from errors import ContractError, NumericError, ShapeError


class TestOperations(unittest.TestCase):

    def setUp(self):
        self.g = Graph("extended")

    def test_matmul_identity_and_hand_product(self):
        m = np.array([[2.0, -1.0], [0.5, 3.0]])
        out = self.g.matmul(self.g.constant(np.eye(2)), self.g.constant(m))
        np.testing.assert_array_equal(self.g.value(out), m)

        out = self.g.matmul(self.g.constant([[1, 2], [3, 4]]), self.g.constant([[1], [1]]))
        np.testing.assert_array_equal(self.g.value(out), [[3.0], [7.0]])

    def test_matmul_shape_error_names_both_shapes(self):
        with self.assertRaises(ShapeError) as ctx:
            self.g.matmul(self.g.constant(np.ones((2, 3))), self.g.constant(np.ones((2, 3))))
        self.assertIn("(2, 3)", str(ctx.exception))

    def test_matmul_associativity(self):
        rng = np.random.default_rng(1)
        a, b, c = (self.g.constant(rng.standard_normal(s)) for s in ((3, 4), (4, 5), (5, 2)))
        left = self.g.value(self.g.matmul(self.g.matmul(a, b), c))
        right = self.g.value(self.g.matmul(a, self.g.matmul(b, c)))
        self.assertLess(np.linalg.norm(left - right) / np.linalg.norm(left), 1e-6)

    def test_gelu_values(self):
        out = self.g.value(self.g.gelu(self.g.constant([[0.0, 1.0, -1.0]])))
        self.assertEqual(out[0, 0], 0.0)
        self.assertAlmostEqual(out[0, 1], 0.841345, delta=1e-5)
        self.assertAlmostEqual(out[0, 2], -0.158655, delta=1e-5)

    def test_gelu_matches_math_erf(self):
        x = np.linspace(-6, 6, 49).reshape(7, 7)
        out = self.g.value(self.g.gelu(self.g.constant(x)))
        expected = np.vectorize(lambda v: v * 0.5 * (1.0 + math.erf(v / math.sqrt(2.0))))(x)
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)

    def test_softmax_rows(self):
        out = self.g.value(self.g.softmax_rows(self.g.constant([[0.0, 0.0], [1.0, 0.0]])))
        np.testing.assert_allclose(out[0], [0.5, 0.5])
        np.testing.assert_allclose(out[1], [0.731059, 0.268941], atol=1e-6)

    def test_softmax_shift_invariance_and_row_sums(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-50, 50, size=(6, 5))
        base = self.g.value(self.g.softmax_rows(self.g.constant(x)))
        shifted = self.g.value(self.g.softmax_rows(self.g.constant(x + 7.5)))
        np.testing.assert_allclose(base, shifted, atol=1e-12)
        np.testing.assert_allclose(base.sum(axis=1), np.ones(6), atol=1e-9)

    def test_bce_mean_examples(self):
        half = self.g.constant(np.full((2, 2), 0.5))
        self.assertAlmostEqual(self.g.scalar(self.g.bce_mean(half, half)), math.log(2), places=9)

        e = np.array([[0.731059, 0.268941], [0.268941, 0.731059]])
        t = self.g.constant(e)
        self.assertAlmostEqual(self.g.scalar(self.g.bce_mean(t, t)), 0.582208, delta=1e-4)

        ones = self.g.constant(np.ones((2, 3)))
        near = self.g.constant(np.full((2, 3), 1.0 - 1e-7))
        self.assertAlmostEqual(self.g.scalar(self.g.bce_mean(ones, near)), 1e-7, delta=1e-9)

    def test_bce_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            self.g.bce_mean(self.g.constant(np.ones((2, 2))), self.g.constant(np.ones((2, 3))))

    def test_log_requires_positive_input(self):
        with self.assertRaises(NumericError):
            self.g.log(self.g.constant([[0.0, 1.0]]))

    def test_non_finite_input_rejected(self):
        with self.assertRaises(NumericError):
            tensor2([[1.0, float("nan")]])


class TestBackward(unittest.TestCase):

    def test_sum_gradient_is_ones(self):
        g = Graph("extended")
        x = g.leaf(np.arange(6.0).reshape(2, 3), trainable=True)
        grads = backward(g, g.sum(x))
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))

    def test_square_gradient(self):
        g = Graph("extended")
        x = g.leaf([[2.0, 3.0]], trainable=True)
        grads = g.backward(g.sum(g.mul(x, x)))
        np.testing.assert_array_equal(grads[x], [[4.0, 6.0]])

    def test_matmul_sum_gradient(self):
        rng = np.random.default_rng(3)
        g = Graph("extended")
        a = g.leaf(rng.standard_normal((3, 4)), trainable=True)
        b_val = rng.standard_normal((4, 2))
        grads = g.backward(g.sum(g.matmul(a, g.constant(b_val))))
        np.testing.assert_allclose(grads[a], np.ones((3, 2)) @ b_val.T, atol=1e-12)

    def test_non_scalar_loss_is_contract_error(self):
        g = Graph("extended")
        x = g.leaf(np.ones((2, 2)), trainable=True)
        with self.assertRaises(ContractError):
            g.backward(x)

    def test_unreachable_parameter_gets_zeros(self):
        g = Graph("extended")
        x = g.leaf(np.ones((1, 2)), trainable=True)
        unused = g.leaf(np.ones((3, 3)), trainable=True)
        grads = g.backward(g.sum(x))
        np.testing.assert_array_equal(grads[unused], np.zeros((3, 3)))

    def test_random_composed_graph_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 3)), "c": rng.standard_normal((1, 3))}
        x = rng.standard_normal((3, 3))

        def loss_fn(p):
            g = Graph("extended")
            a, b, c = (g.leaf(p[n], trainable=True) for n in ("a", "b", "c"))
            h = g.gelu(g.add_row(g.matmul(g.matmul(g.constant(x), a), b), c))
            s = g.softmax_rows(g.concat(h, g.transpose(h)))
            loss = g.bce_mean(g.softmax_rows(g.inner(h, h)), g.softmax_rows(g.scale(g.inner(h, g.constant(x)), 0.5)))
            loss = g.add(loss, g.mean(s))
            grads = g.backward(loss)
            return g.scalar(loss), {"a": grads[a], "b": grads[b], "c": grads[c]}

        report = finite_diff_check(loss_fn, params)
        self.assertTrue(report.passed, report.per_param)
        self.assertLess(report.max_rel_error, 1e-5)


class TestFiniteDiffCheck(unittest.TestCase):

    @staticmethod
    def quadratic(p):
        theta = p["theta"]
        return float((theta ** 2).sum() + 3.0 * theta.sum()), {"theta": 2.0 * theta + 3.0}

    def test_quadratic_is_exact(self):
        report = finite_diff_check(self.quadratic, {"theta": np.array([[0.3, -1.2, 2.5]])})
        self.assertLess(report.max_rel_error, 1e-9)
        self.assertTrue(report.passed)

    def test_corrupted_gradient_is_flagged(self):
        def corrupted(p):
            value, grads = self.quadratic(p)
            return value, {"theta": grads["theta"] * 1.1}

        report = finite_diff_check(corrupted, {"theta": np.array([[0.3, -1.2, 2.5]])})
        self.assertFalse(report.passed)
        self.assertEqual(report.offending, ["theta"])
        self.assertEqual(report.worst_param, "theta")

    def test_single_bad_entry_in_large_tensor_is_flagged(self):
        theta = np.random.default_rng(6).uniform(0.5, 1.5, size=(20, 30))

        def one_entry_off(p):
            value, grads = self.quadratic(p)
            grads["theta"][7, 11] *= 1.0 + 1e-4
            return value, grads

        report = finite_diff_check(one_entry_off, {"theta": theta})
        self.assertEqual(report.offending, ["theta"])
        self.assertEqual(report.worst_index, (7, 11))
        self.assertAlmostEqual(report.max_rel_error, 1e-4, delta=1e-6)

    def test_non_deterministic_loss_is_contract_error(self):
        calls = iter(range(100))

        def noisy(p):
            return float(next(calls)), {"theta": np.zeros_like(p["theta"])}

        with self.assertRaises(ContractError):
            finite_diff_check(noisy, {"theta": np.zeros((1, 2))})

    def test_relative_error(self):
        self.assertEqual(relative_error(2.0, 2.0), 0.0)
        self.assertAlmostEqual(relative_error(1.1, 1.0), 0.1 / 1.1)
        self.assertEqual(relative_error(0.0, 0.0), 0.0)
        np.testing.assert_allclose(relative_error(np.array([1.0, 0.0, -2.0]), np.array([1.0, 1e-3, -1.0])), [0.0, 1.0, 0.5])


if __name__ == '__main__':
    unittest.main()
