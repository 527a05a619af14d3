"""Tests of the Adam updates"""
import unittest

import numpy as np

from matnet.optimizer import OptimState, adam_step, global_norm
from matnet.tensor import ShapeError, Tensor


def setup(values, lr=0.01, clip=5.0):
    param = Tensor(np.array(values, dtype=np.float64), requires_grad=True, dtype=np.float64)
    state = OptimState({"w": param.shape}, lr=lr, clip=clip)
    return {"w": param}, state


class AdamTest(unittest.TestCase):
    """Single steps, convergence, clipping and skipping"""

    def test_first_step(self):
        """Bias correction makes the first step lr in every coordinate"""
        params, state = setup([1.0, -2.0, 3.0])
        self.assertTrue(adam_step(params, {"w": np.array([0.5, -4.0, 2.0])}, state))
        np.testing.assert_allclose(params["w"].data, [0.99, -1.99, 2.99], atol=1e-7)
        self.assertEqual(state.step, 1)

    def test_zero_gradient(self):
        params, state = setup([1.0, 2.0])
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"].data, [1.0, 2.0])

    def test_quadratic(self):
        params, state = setup(np.full(4, 5.0), lr=0.05)
        start = np.linalg.norm(params["w"].data)
        for _ in range(1000):
            adam_step(params, {"w": params["w"].data.copy()}, state)
        self.assertLess(np.linalg.norm(params["w"].data), 0.05 * start)

    def test_clip(self):
        params, state = setup([0.0, 0.0])
        self.assertAlmostEqual(global_norm({"w": np.array([30.0, 40.0])}), 50.0)
        adam_step(params, {"w": np.array([30.0, 40.0])}, state)
        np.testing.assert_allclose(state.m["w"], [0.3, 0.4])

    def test_skip_non_finite(self):
        params, state = setup([1.0, 2.0])
        with self.assertLogs("matnet.optimizer", level="WARNING"):
            self.assertFalse(adam_step(params, {"w": np.array([np.nan, 1.0])}, state))
        np.testing.assert_array_equal(params["w"].data, [1.0, 2.0])
        self.assertEqual((state.step, state.skipped), (0, 1))
        np.testing.assert_array_equal(state.m["w"], np.zeros(2))

    def test_shape(self):
        params, state = setup([1.0, 2.0])
        with self.assertRaises(ShapeError):
            adam_step(params, {"w": np.zeros(3)}, state)
        with self.assertRaises(ShapeError):
            adam_step(params, {"v": np.zeros(2)}, state)

    def test_state_arrays(self):
        params, state = setup([1.0, 2.0])
        adam_step(params, {"w": np.array([0.1, -0.3])}, state)
        restored = OptimState({"w": (2,)})
        restored.load(state.arrays())
        self.assertEqual(restored.step, 1)
        np.testing.assert_array_equal(restored.m["w"], state.m["w"])
        np.testing.assert_array_equal(restored.v["w"], state.v["w"])
        with self.assertRaises(ShapeError):
            OptimState({"w": (2,), "u": (1,)}).load(state.arrays())
        with self.assertRaises(ShapeError):
            OptimState({"w": (3,)}).load(state.arrays())


if __name__ == "__main__":
    unittest.main()
