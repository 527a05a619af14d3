"""Tests of the tensor engine and its differentiation tape"""
import threading
import unittest

import numpy as np

from matnet import gradcheck
from matnet import tensor as T
from matnet.tensor import NumericError, ShapeError, Tape, TapeError, Tensor

TOL = 1e-5
INSTANCES = 20


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar with a non-trivial gradient for every output element"""
    return T.sum(out * weights)


class TensorTest(unittest.TestCase):
    """Construction and options of tensors"""

    def test_create(self):
        t = Tensor(np.ones((2, 3)))
        self.assertEqual(t.shape, (2, 3))
        self.assertEqual(t.dtype, np.float32)
        self.assertFalse(t.requires_grad)
        with self.assertRaises(ShapeError):
            Tensor(np.ones((1, 1, 1, 1, 1)))
        with self.assertRaises(ShapeError):
            Tensor(np.ones((2, 0)))

    def test_precision(self):
        with T.precision(64):
            self.assertEqual(Tensor([1.0]).dtype, np.float64)
        self.assertEqual(Tensor([1.0]).dtype, np.float32)
        with self.assertRaises(ValueError):
            with T.precision(16):
                pass

    def test_checked(self):
        """Non-finite results raise only in checked mode"""
        x = Tensor([0.0, 1.0])
        with np.errstate(divide="ignore"):
            self.assertTrue(np.isinf(T.log(x).data[0]))
            with T.checked():
                self.assertTrue(T.is_checked())
                with self.assertRaises(NumericError):
                    T.log(x)
        self.assertFalse(T.is_checked())


class TapeTest(unittest.TestCase):
    """Recording and differentiation"""

    def test_sum(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            root = T.sum(x)
        grads = tape.backward(root)
        np.testing.assert_array_equal(grads[x], np.ones((2, 3)))

    def test_half_square(self):
        x = Tensor(np.array([[1.0, -2.0, 3.0]]), requires_grad=True)
        with Tape() as tape:
            root = T.sum(x * x) * 0.5
        np.testing.assert_allclose(tape.backward(root)[x], x.data)

    def test_errors(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            out = x * 2.0
            root = T.sum(out)
        with self.assertRaises(TapeError):
            tape.backward(out)  # not scalar
        tape.backward(root)
        with self.assertRaises(TapeError):
            tape.backward(root)  # stale
        tape.reset()
        with Tape() as other:
            root2 = T.sum(x)
        with self.assertRaises(TapeError):
            tape.backward(root2)
        self.assertEqual(len(other.nodes), 1)

    def test_no_recording(self):
        """Constants and suspended evaluation leave the tape empty"""
        x = Tensor(np.ones(3))
        with Tape() as tape:
            y = T.exp(x)
            with T.suspended():
                T.exp(Tensor(np.ones(3), requires_grad=True))
        self.assertFalse(y.requires_grad)
        self.assertEqual(tape.nodes, [])

    def test_stop_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            root = T.sum(x * T.stop_gradient(x)) + T.sum(x)
        np.testing.assert_array_equal(tape.backward(root)[x], 2 * np.ones(3))

    def test_thread_confinement(self):
        """A tape is only active in the thread that entered it"""
        seen = []
        with Tape():
            worker = threading.Thread(target=lambda: seen.append(T.active_tape()))
            worker.start()
            worker.join()
            self.assertIsNotNone(T.active_tape())
        self.assertEqual(seen, [None])


class OpsTest(unittest.TestCase):
    """Values and shape contracts of the operations"""

    def test_conv2d_same_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 3, 3))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1
        out = T.conv2d_same(x, kernel, np.zeros(1))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)
        zero = T.conv2d_same(x, np.zeros((2, 1, 3, 3)), np.zeros(2))
        np.testing.assert_array_equal(zero.data, np.zeros((1, 2, 3, 3)))

    def test_conv2d_reference(self):
        """Compare with a direct loop over the output positions"""
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 5, 5))
        kernel = rng.normal(size=(4, 3, 3, 3))
        bias = rng.normal(size=4)
        with T.precision(64):
            out = T.conv2d(x, kernel, bias, stride=2, padding=1).data
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 4, 3, 3))
        for i in range(3):
            for j in range(3):
                window = padded[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                expected[:, :, i, j] = np.einsum("bchw,ochw->bo", window, kernel) + bias
        np.testing.assert_allclose(out, expected, rtol=1e-10)

    def test_conv2d_errors(self):
        with self.assertRaises(ShapeError):
            T.conv2d_same(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)), np.zeros(1))
        with self.assertRaises(ShapeError):
            T.conv2d_same(np.ones((1, 2, 4, 4)), np.ones((1, 2, 2, 2)), np.zeros(1))

    def test_lrelu(self):
        out = T.lrelu(Tensor([0.0, -2.0, 3.0]), 0.1)
        np.testing.assert_allclose(out.data, [0.0, -0.2, 3.0])
        x = Tensor([3.0, -3.0], requires_grad=True)
        with Tape() as tape:
            root = T.sum(T.lrelu(x, 0.1))
        np.testing.assert_allclose(tape.backward(root)[x], [1.0, 0.1])
        with self.assertRaises(ValueError):
            T.lrelu(x, 1.5)

    def test_concat_features(self):
        a = Tensor(np.ones((2, 3, 4, 4)))
        b = Tensor(np.zeros((2, 5, 4, 4)))
        self.assertIs(T.concat_features([a]), a)
        self.assertEqual(T.concat_features([a, b]).shape, (2, 8, 4, 4))
        with self.assertRaises(ShapeError):
            T.concat_features([a, Tensor(np.ones((2, 1, 2, 2)))])

    def test_linear(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_allclose(T.linear(x, np.eye(3), np.zeros(3)).data, x)
        out = T.linear(x, np.zeros((2, 3)), np.array([1.0, -1.0]))
        np.testing.assert_allclose(out.data, [[1, -1], [1, -1]])
        with self.assertRaises(ShapeError):
            T.linear(x, np.zeros((2, 4)), np.zeros(2))

    def test_strided_resample_shapes(self):
        x = Tensor(np.ones((1, 3, 8, 8)))
        down = T.strided_resample(x, "down", np.ones((5, 3, 3, 3)), np.zeros(5))
        self.assertEqual(down.shape, (1, 5, 4, 4))
        up = T.strided_resample(down, "up", np.ones((3, 5, 3, 3)), np.zeros(3))
        self.assertEqual(up.shape, (1, 3, 8, 8))
        with self.assertRaises(ShapeError):
            T.strided_resample(np.ones((1, 3, 7, 7)), "down", np.ones((5, 3, 3, 3)), np.zeros(5))
        with self.assertRaises(ValueError):
            T.strided_resample(x, "sideways", np.ones((5, 3, 3, 3)), np.zeros(5))

    def test_logsumexp_stable(self):
        out = T.logsumexp(Tensor(np.array([[1000.0, 1000.0]]), dtype=np.float64), axis=1)
        np.testing.assert_allclose(out.data, [1000 + np.log(2)], rtol=1e-6)


class GradientTest(unittest.TestCase):
    """Analytic gradients of all differentiable operations against finite differences"""

    def assert_gradients(self, make_fn, shapes, instances=INSTANCES, positive=False, tol=TOL):
        rng = np.random.default_rng(42)
        for _ in range(instances):
            inputs = [Tensor(rng.normal(size=s), dtype=np.float64) for s in shapes]
            if positive:
                for t in inputs:
                    t.data = np.abs(t.data) + 0.5
            fn = make_fn(inputs, rng)
            self.assertLess(gradcheck.check_gradients(fn, inputs), tol)

    def test_elementwise(self):
        def make(ops):
            def make_fn(inputs, rng):
                w = rng.normal(size=inputs[0].shape)
                return lambda: weighted_sum(ops(*inputs), w)

            return make_fn

        self.assert_gradients(make(lambda a, b: a * b + a - b), [(2, 3), (2, 3)])
        self.assert_gradients(make(lambda a, b: a / b), [(2, 3), (2, 3)], positive=True)
        self.assert_gradients(make(lambda a, b: a * b), [(2, 3, 2, 2), (1, 3, 1, 1)])
        for op in (T.exp, T.tanh, T.sigmoid, T.softplus, T.neg):
            self.assert_gradients(make(op), [(3, 4)])
        self.assert_gradients(make(T.log), [(3, 4)], positive=True)
        self.assert_gradients(make(lambda a: T.lrelu(a, 0.1)), [(3, 4)])

    def test_reductions(self):
        def make_fn(inputs, rng):
            (x,) = inputs
            w = rng.normal(size=2)
            return lambda: weighted_sum(T.logsumexp(T.reshape(x, (2, 6)), axis=1), w) + T.mean(x * x)

        self.assert_gradients(make_fn, [(2, 3, 2)])

        def make_fn2(inputs, rng):
            (x,) = inputs
            w = rng.normal(size=2)
            return lambda: weighted_sum(T.sum_per_example(x * x), w)

        self.assert_gradients(make_fn2, [(2, 2, 3, 3)])

    def test_features(self):
        def make_fn(inputs, rng):
            a, b = inputs
            w = rng.normal(size=(2, 5, 3, 3))
            return lambda: weighted_sum(T.take_features(T.concat_features([a, b, a]), 1, 6), w)

        self.assert_gradients(make_fn, [(2, 2, 3, 3), (2, 3, 3, 3)])

    def test_linear(self):
        def make_fn(inputs, rng):
            w = rng.normal(size=(3, 2))
            return lambda: weighted_sum(T.linear(*inputs), w)

        self.assert_gradients(make_fn, [(3, 4), (2, 4), (2,)])

    def test_conv2d_same(self):
        def make_fn(inputs, rng):
            w = rng.normal(size=(2, 3, 5, 5))
            return lambda: weighted_sum(T.conv2d_same(*inputs), w)

        self.assert_gradients(make_fn, [(2, 4, 5, 5), (3, 4, 3, 3), (3,)], instances=3)

    def test_strided_resample(self):
        def make_down(inputs, rng):
            w = rng.normal(size=(1, 3, 2, 2))
            return lambda: weighted_sum(T.strided_resample(inputs[0], "down", inputs[1], inputs[2]), w)

        def make_up(inputs, rng):
            w = rng.normal(size=(1, 3, 6, 6))
            return lambda: weighted_sum(T.strided_resample(inputs[0], "up", inputs[1], inputs[2]), w)

        self.assert_gradients(make_down, [(1, 2, 4, 4), (3, 2, 3, 3), (3,)])
        self.assert_gradients(make_up, [(1, 2, 3, 3), (3, 2, 3, 3), (3,)])

    def test_pad_dilate(self):
        def make_fn(inputs, rng):
            w = rng.normal(size=(1, 2, 7, 6))
            return lambda: weighted_sum(T.pad2d(T.dilate2(inputs[0]), 1, 1, 0, 1), w)

        self.assert_gradients(make_fn, [(1, 2, 3, 3)], instances=3)


if __name__ == "__main__":
    unittest.main()
