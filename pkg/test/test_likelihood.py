"""Tests of the output likelihoods"""
import unittest

import numpy as np

from matnet import likelihood
from matnet import tensor as T
from matnet.likelihood.logistic import LEVELS
from matnet.rng import Rng
from matnet.tensor import ShapeError, Tensor


class LikelihoodTest(unittest.TestCase):
    """Values, normalization and sampling of the likelihood kinds"""

    def test_make(self):
        self.assertEqual(likelihood.make("bernoulli", 1).n_features, 1)
        self.assertEqual(likelihood.make("diag_gaussian", 3).n_features, 6)
        self.assertEqual(likelihood.make("integrated_logistic", 3).n_features, 6)
        with self.assertRaises(ValueError):
            likelihood.make("poisson", 1)

    def test_bernoulli(self):
        like = likelihood.make("bernoulli", 1)
        x = np.array([[[[0.0, 1.0], [1.0, 1.0]]]])
        with T.precision(64):
            nll = like.nll(Tensor(np.zeros((1, 1, 2, 2))), x)
            np.testing.assert_allclose(nll.data, [4 * np.log(2)])
            logits = np.array([[[[2.0, -1.0], [0.5, 3.0]]]])
            expected = np.sum(np.log1p(np.exp(logits)) - x * logits)
            np.testing.assert_allclose(like.nll(Tensor(logits), x).data, [expected])
        np.testing.assert_allclose(like.mean(Tensor(np.zeros((1, 1, 2, 2)))), np.full((1, 1, 2, 2), 0.5))

    def test_bernoulli_check(self):
        like = likelihood.make("bernoulli", 1)
        params = Tensor(np.zeros((1, 1, 2, 2)))
        like.nll(params, np.full((1, 1, 2, 2), 0.5))
        with T.checked():
            with self.assertRaises(ValueError):
                like.nll(params, np.full((1, 1, 2, 2), 0.5))

    def test_shape(self):
        like = likelihood.make("bernoulli", 1)
        with self.assertRaises(ShapeError):
            like.nll(Tensor(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 3, 3)))
        with self.assertRaises(ShapeError):
            like.nll(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 1, 2, 2)))

    def test_weight(self):
        like = likelihood.make("bernoulli", 1)
        weight = np.array([[[[1.0, 0.0], [0.0, 0.0]]]])
        nll = like.nll(Tensor(np.zeros((1, 1, 2, 2))), np.ones((1, 1, 2, 2)), weight)
        np.testing.assert_allclose(nll.data, [np.log(2)], rtol=1e-6)

    def test_gaussian(self):
        like = likelihood.make("diag_gaussian", 1)
        x = np.full((1, 1, 2, 2), 0.25)
        log_var = -2.0
        params = np.concatenate([x, np.full_like(x, log_var)], axis=1)
        with T.precision(64):
            nll = like.nll(Tensor(params), x)
        np.testing.assert_allclose(nll.data, [4 * 0.5 * (np.log(2 * np.pi) + log_var)])

    def test_logistic_normalized(self):
        """The masses of all 256 levels sum to one"""
        like = likelihood.make("integrated_logistic", 1)
        x = (np.arange(LEVELS) / (LEVELS - 1)).reshape(1, 1, 16, 16)
        for mu, log_scale in ((0.3, -3.0), (0.0, -7.0), (1.2, 0.0)):
            params = np.concatenate([np.full_like(x, mu), np.full_like(x, log_scale)], axis=1)
            with T.precision(64):
                nll = like.nll_map(Tensor(params), Tensor(x)).data
            self.assertAlmostEqual(float(np.exp(-nll).sum()), 1.0, places=6)

    def test_logistic_sharp(self):
        """A narrow density centred on a level puts all mass there"""
        like = likelihood.make("integrated_logistic", 1)
        x = np.full((1, 1, 1, 1), 100 / 255)
        params = np.concatenate([x, np.full_like(x, -7.0)], axis=1)
        with T.precision(64):
            self.assertLess(like.nll(Tensor(params), x).item(), 1e-3)

    def test_sample(self):
        rng = Rng(0)
        for kind in likelihood.KINDS:
            like = likelihood.make(kind, 2)
            params = Tensor(np.zeros((3, like.n_features, 4, 4)))
            draws = like.sample(params, rng)
            self.assertEqual(draws.shape, (3, 2, 4, 4))
            self.assertEqual(like.mean(params).shape, (3, 2, 4, 4))
        levels = likelihood.make("integrated_logistic", 1).sample(Tensor(np.zeros((2, 2, 4, 4))), rng) * 255
        np.testing.assert_allclose(levels, np.rint(levels), atol=1e-3)
        self.assertTrue(np.all(levels >= 0) and np.all(levels <= 255))


if __name__ == "__main__":
    unittest.main()
