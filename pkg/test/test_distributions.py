"""Tests of the latent distributions, KL divergences and bounds"""
import unittest

import numpy as np
from scipy import special

from matnet import distributions as D
from matnet import gradcheck
from matnet import tensor as T
from matnet.rng import Rng
from matnet.tensor import ShapeError, Tensor


def gauss(mu, log_var) -> D.DiagGaussian:
    return D.DiagGaussian(np.atleast_2d(np.asarray(mu, dtype=np.float64)), np.atleast_2d(np.asarray(log_var, dtype=np.float64)))


class DiagGaussianTest(unittest.TestCase):
    """Construction, densities and KL of diagonal Gaussians"""

    def test_clamp(self):
        with T.precision(64):
            q = gauss([0.0, 0.0, 0.0], [-10.0, 0.0, 5.0])
            self.assertTrue(q.clamped)
            np.testing.assert_array_equal(q.log_var.data, [[-6.0, 0.0, 3.0]])
            self.assertFalse(gauss([1.0], [2.0]).clamped)

    def test_from_features(self):
        q = D.DiagGaussian.from_features(Tensor(np.ones((2, 4, 3, 3))))
        self.assertEqual(q.shape, (2, 2, 3, 3))
        with self.assertRaises(ShapeError):
            D.DiagGaussian.from_features(Tensor(np.ones((2, 3, 3, 3))))

    def test_log_prob(self):
        with T.precision(64):
            q = gauss([0.0, 1.0], [0.0, np.log(4.0)])
            z = np.array([[0.5, -1.0]])
            expected = np.sum([np.log(2 * np.pi * v) + (zi - m) ** 2 / v for zi, m, v in zip(z[0], [0, 1], [1, 4])])
            np.testing.assert_allclose(q.log_prob(z).data, [-0.5 * expected])

    def test_kl_closed_form(self):
        with T.precision(64):
            q = gauss([0.3, -1.0], [0.2, -0.5])
            np.testing.assert_allclose(D.kl_diag_gauss(q, q).data, [0.0], atol=1e-12)
            np.testing.assert_allclose(D.kl_diag_gauss(gauss([1.0], [0.0]), gauss([0.0], [0.0])).data, [0.5])

    def test_kl_monte_carlo(self):
        """Closed form KL agrees with the mean of log q - log p over 10^5 samples of q

        Each of the 50 pairs should lie within 3 standard errors. About 0.13 pairs
        exceed that by chance, so two are tolerated as long as they stay within 4.5.
        """
        rng = np.random.default_rng(5)
        n = 100000
        scores = []
        with T.precision(64):
            for i in range(50):
                mq, lq, mp, lp = (rng.normal(scale=0.7, size=(1, 3)) for _ in range(4))
                q, p = gauss(mq, lq), gauss(mp, lp)
                eps = Rng(i).normal((n, 3))
                z = D.reparam_sample(D.DiagGaussian(np.repeat(mq, n, 0), np.repeat(lq, n, 0)), eps)
                diff = q.log_prob(z).data - p.log_prob(z).data
                closed = D.kl_diag_gauss(q, p).item()
                scores.append(abs(diff.mean() - closed) / (diff.std() / np.sqrt(n)))
        self.assertLessEqual(int(np.sum(np.array(scores) > 3)), 2)
        self.assertLess(max(scores), 4.5)

    def test_reparam_moments(self):
        """Samples of 10^5 draws have the mean and variance of q"""
        n = 100000
        mu = np.array([[0.5, -2.0, 1.5]])
        log_var = np.array([[1.0, 0.0, -2.0]])
        with T.precision(64):
            q = D.DiagGaussian(np.repeat(mu, n, 0), np.repeat(log_var, n, 0))
            z = D.reparam_sample(q, Rng(4).normal((n, 3))).data
        sd = np.exp(0.5 * log_var[0])
        np.testing.assert_array_less(np.abs(z.mean(axis=0) - mu[0]), 4 * sd / np.sqrt(n))
        # relative standard error of a sample variance is sqrt(2 / n)
        np.testing.assert_allclose(z.var(axis=0), sd**2, rtol=4 * np.sqrt(2 / n))

    def test_reparam(self):
        with T.precision(64):
            q = gauss([[0.5, -2.0]], [[1.0, 0.0]])
            np.testing.assert_array_equal(D.reparam_sample(q, np.zeros((1, 2))).data, q.mu.data)
            np.testing.assert_allclose(D.reparam_sample(q, np.ones((1, 2))).data, [[0.5 + np.exp(0.5), -1.0]])
            with self.assertRaises(ShapeError):
                D.reparam_sample(q, np.zeros((2, 2)))

    def test_kl_gradients(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            inputs = [Tensor(rng.normal(scale=0.5, size=(2, 3)), dtype=np.float64) for _ in range(4)]

            def fn():
                q = D.DiagGaussian(inputs[0], inputs[1])
                p = D.DiagGaussian(inputs[2], inputs[3])
                return T.sum(D.kl_diag_gauss(q, p))

            self.assertLess(gradcheck.check_gradients(fn, inputs), 1e-5)


class MixtureTest(unittest.TestCase):
    """Mixture prior, approximate KL, responsibilities and entropy"""

    def test_errors(self):
        with self.assertRaises(ValueError):
            D.MixturePrior([])
        with self.assertRaises(ShapeError):
            D.MixturePrior([gauss([0.0], [0.0]), gauss([0.0, 1.0], [0.0, 0.0])])

    def test_single_component(self):
        with T.precision(64):
            q = gauss([[0.3, 0.1]], [[0.5, -0.2]])
            p = gauss([[1.0, -1.0]], [[0.0, 0.3]])
            np.testing.assert_allclose(
                D.kl_mixture_approx(q, D.MixturePrior([p])).data, D.kl_diag_gauss(q, p).data, rtol=1e-12
            )
            z = np.array([[0.2, 0.4]])
            np.testing.assert_allclose(D.MixturePrior([p]).log_prob(z).data, p.log_prob(z).data, rtol=1e-12)

    def test_identical_components(self):
        """k copies of one prior lower the approximate KL by ln k"""
        with T.precision(64):
            q = gauss([[0.3]], [[0.5]])
            p = gauss([[1.0]], [[0.0]])
            expected = D.kl_diag_gauss(q, p).item() - np.log(4)
            np.testing.assert_allclose(D.kl_mixture_approx(q, D.MixturePrior([p] * 4)).data, [expected])

    def test_brute_force(self):
        with T.precision(64):
            q = gauss([[0.3, -0.4]], [[0.5, 0.1]])
            comps = [gauss([[m, -m]], [[0.1 * m, 0.0]]) for m in (-1.0, 0.0, 2.0)]
            kls = np.array([D.kl_diag_gauss(q, c).item() for c in comps])
            expected = -np.log(np.sum(np.exp(-kls)))
            np.testing.assert_allclose(D.kl_mixture_approx(q, D.MixturePrior(comps)).data, [expected])

    def test_responsibilities(self):
        with T.precision(64):
            q = gauss([[0.0]], [[0.0]])
            prior = D.MixturePrior([gauss([[1.0]], [[0.0]]), gauss([[np.sqrt(3.0)]], [[0.0]])])
            resp = D.mixture_responsibilities(q, prior)
            np.testing.assert_allclose(resp.data, [[special.expit(1.0), special.expit(-1.0)]])
            np.testing.assert_allclose(D.entropy_penalty(resp).item(), 0.5822, atol=1e-4)

    def test_entropy(self):
        with T.precision(64):
            self.assertAlmostEqual(D.entropy_penalty(Tensor(np.full((3, 4), 0.25))).item(), np.log(4))
            self.assertAlmostEqual(D.entropy_penalty(Tensor(np.eye(3))).item(), 0.0, places=9)
            with T.checked():
                with self.assertRaises(ValueError):
                    D.entropy_penalty(Tensor([[0.5, 0.7]]))

    def test_sample(self):
        prior = D.MixturePrior([gauss([[-100.0, 0.0]], [[-6.0, -6.0]]), gauss([[100.0, 0.0]], [[-6.0, -6.0]])])
        z = prior.sample(200, Rng(0)).data
        self.assertEqual(z.shape, (200, 2))
        self.assertTrue(np.all(np.abs(np.abs(z[:, 0]) - 100) < 1))
        self.assertTrue(np.any(z[:, 0] > 0) and np.any(z[:, 0] < 0))

    def test_mixture_gradients(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            inputs = [Tensor(rng.normal(scale=0.5, size=(2, 2)), dtype=np.float64) for _ in range(2)]
            means = [rng.normal(size=(1, 2)) for _ in range(3)]

            def fn():
                q = D.DiagGaussian(inputs[0], inputs[1])
                prior = D.MixturePrior([D.DiagGaussian(m, np.zeros((1, 2))) for m in means])
                resp = D.mixture_responsibilities(q, prior)
                return T.sum(D.kl_mixture_approx(q, prior)) + D.entropy_penalty(resp)

            self.assertLess(gradcheck.check_gradients(fn, inputs), 1e-5)


class BoundTest(unittest.TestCase):
    """Importance weighted bound and unit conversion"""

    def test_iwae(self):
        with T.precision(64):
            np.testing.assert_allclose(D.iwae_bound(np.full((3, 5), -2.5)).data, [-2.5] * 3)
            lw = np.array([[0.0, np.log(3.0)]])
            np.testing.assert_allclose(D.iwae_bound(lw).data, [np.log(2.0)])
        with self.assertRaises(ShapeError):
            D.iwae_bound(np.zeros(4))

    def test_bits_per_pixel(self):
        self.assertAlmostEqual(D.bits_per_pixel(784 * np.log(2), 784, discrete=True), 1.0)
        self.assertAlmostEqual(D.bits_per_pixel(0.0, 784), 8.0)
        self.assertAlmostEqual(D.bits_per_pixel(-784 * np.log(256), 784), 0.0)
        with self.assertRaises(ValueError):
            D.bits_per_pixel(1.0, 0)


if __name__ == "__main__":
    unittest.main()
