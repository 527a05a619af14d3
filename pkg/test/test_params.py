"""Tests of the parameter store and group freezing"""
import threading
import unittest

import numpy as np

from matnet import params
from matnet.params import ParamStore
from matnet.rng import Rng
from matnet.tensor import ShapeError


class ParamStoreTest(unittest.TestCase):
    """Creation, freezing and loading of parameters"""

    def setUp(self):
        self.store = ParamStore("random", Rng(0))
        self.store.add("a.kernel", (4, 2, 3, 3), "td")
        self.store.add("a.bias", (4,), "td", kind="constant", value=1.0)
        self.store.add("b.kernel", (2, 2, 3, 3), "bu_inf", kind="zeros")

    def test_add(self):
        self.assertEqual(len(self.store), 3)
        self.assertEqual(self.store.count(), 4 * 18 + 4 + 2 * 18)
        np.testing.assert_array_equal(self.store.get("a.bias").data, np.ones(4))
        self.assertTrue(np.any(self.store.get("a.kernel").data != 0))
        self.assertIn("b.kernel", self.store)
        self.assertEqual(self.store.names(["td"]), ["a.kernel", "a.bias"])
        with self.assertRaises(ValueError):
            self.store.add("a.bias", (4,), "td")
        with self.assertRaises(ValueError):
            self.store.add("c", (4,), "decoder")
        with self.assertRaises(ValueError):
            ParamStore("uniform")

    def test_zero_init(self):
        store = ParamStore("zero")
        store.add("w", (3, 3), "td")
        store.add("b", (3,), "td", kind="constant", value=1.0)
        for _, p in store.items():
            np.testing.assert_array_equal(p.data, np.zeros(p.shape))

    def test_frozen(self):
        param = self.store.params["a.kernel"]
        self.assertIs(self.store.get("a.kernel"), param)
        with params.frozen("td"):
            copy = self.store.get("a.kernel")
            self.assertIsNot(copy, param)
            self.assertFalse(copy.requires_grad)
            np.testing.assert_array_equal(copy.data, param.data)
            self.assertIs(self.store.get("b.kernel"), self.store.params["b.kernel"])
        self.assertIs(self.store.get("a.kernel"), param)

    def test_frozen_thread_local(self):
        seen = []
        with params.frozen(*params.GENERATOR_GROUPS):
            worker = threading.Thread(target=lambda: seen.append(params.frozen_groups()))
            worker.start()
            worker.join()
        self.assertEqual(seen, [frozenset()])

    def test_load(self):
        arrays = {n: np.full(s, 2.0) for n, s in ((n, p.shape) for n, p in self.store.items())}
        self.store.load(arrays)
        np.testing.assert_array_equal(self.store.get("b.kernel").data, np.full((2, 2, 3, 3), 2.0))
        with self.assertRaises(ShapeError):
            self.store.load({"a.kernel": arrays["a.kernel"]})
        arrays["a.bias"] = np.ones(5)
        with self.assertRaises(ShapeError):
            self.store.load(arrays)

    def test_zero(self):
        self.store.zero_()
        for _, p in self.store.items():
            self.assertFalse(np.any(p.data))


if __name__ == "__main__":
    unittest.main()
