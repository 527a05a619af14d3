"""Tests of the training loop and the experiment drivers"""
from concurrent.futures import ThreadPoolExecutor
import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from matnet import data, training
from matnet.actions import sgvb_update
from matnet.actions.metrics import MetricsAction
from matnet.data import MaskSpec
from matnet.helpers.misc import read_csv
from matnet.model import MatNet, ModelConfig, Observation
from matnet.rng import Rng
from matnet.training import TrainConfig

SLOW = bool(os.environ.get("MATNET_SLOW"))


def small_net(seed: int = 0, **kwargs) -> MatNet:
    options = dict(
        scales=[8, 4], modules=[1, 1], channels=[4, 4], fc_units=8, fc_latent=4, latent_channels=2, seed=seed
    )
    options.update(kwargs)
    return MatNet(ModelConfig(**options))


class TrainConfigTest(unittest.TestCase):
    """Validation of the training options"""

    def test_errors(self):
        for kwargs in ({"epochs": 0}, {"lr": 0.0}, {"beta1": 1.0}, {"val_fraction": 1.0}, {"threads": 0}):
            with self.assertRaises(ValueError):
                TrainConfig(**kwargs)

    def test_options(self):
        cfg = TrainConfig.from_options({"epochs": 3, "lr": None, "scales": [4]})
        self.assertEqual(cfg.epochs, 3)
        self.assertEqual(cfg.lr, 2e-4)
        self.assertEqual(cfg.effective_reg_weight, 0.0)
        self.assertEqual(TrainConfig(regularizer=True).effective_reg_weight, 0.2)


class BaselineTest(unittest.TestCase):
    """Closed form reference numbers"""

    def test_marginal(self):
        train = np.zeros((2, 1, 2, 2))
        train[0] = 1
        nll = training.marginal_bernoulli_nll(train, train)
        self.assertAlmostEqual(nll, 4 * np.log(2))
        mask = np.zeros((2, 1, 2, 2))
        mask[:, :, 0] = 1
        self.assertAlmostEqual(training.marginal_bernoulli_nll(train, train, mask), 2 * np.log(2))

    def test_marginal_clipped(self):
        ones = np.ones((3, 1, 2, 2))
        self.assertAlmostEqual(training.marginal_bernoulli_nll(ones, ones), -4 * np.log1p(-1e-4))

    def test_quadrant_errors(self):
        images = np.zeros((2, 1, 8, 8))
        with self.assertRaises(ValueError):
            training.quadrant_task(small_net(kind="conditional"), images, 0, Rng(0))
        with self.assertRaises(ValueError):
            training.quadrant_task(small_net(), images, 2, Rng(0))
        baseline = training.quadrant_baseline(np.full((2, 1, 8, 8), 1.0), images, 2, Rng(0))
        self.assertGreater(baseline, 0)


class TrainTest(unittest.TestCase):
    """Short runs on synthetic patterns"""

    def setUp(self):
        self.data = data.synthetic_patterns(44, 8, rng=Rng(1))
        self.cfg = dict(epochs=2, batch_size=10, lr=2e-3, val_fraction=0.1, seed=3)

    def test_rows(self):
        result = training.train(small_net(), self.data, TrainConfig(**self.cfg))
        # 40 training images in batches of 10
        self.assertEqual([row[0] for row in result.metrics], list(range(1, 9)))
        self.assertEqual(result.profile.table().shape, (8, 4))
        self.assertEqual([u for u, _ in result.validation], [8])
        self.assertEqual(result.state.step, 8)

    def test_reproducible(self):
        a = training.train(small_net(), self.data, TrainConfig(**self.cfg))
        b = training.train(small_net(), self.data, TrainConfig(**self.cfg))
        np.testing.assert_array_equal(np.array(a.metrics), np.array(b.metrics))
        np.testing.assert_array_equal(a.profile.table(), b.profile.table())
        self.assertEqual(a.validation, b.validation)

    def test_threads(self):
        """Worker threads do not change the result"""
        one = training.train(small_net(), self.data, TrainConfig(microbatches=2, threads=1, **self.cfg))
        two = training.train(small_net(), self.data, TrainConfig(microbatches=2, threads=2, **self.cfg))
        np.testing.assert_array_equal(np.array(one.metrics), np.array(two.metrics))

    def test_terms(self):
        result = training.train(small_net(), self.data, TrainConfig(**self.cfg))
        metrics = np.array(result.metrics)
        np.testing.assert_allclose(result.profile.totals(), metrics[:, 3], rtol=1e-12)
        np.testing.assert_allclose(metrics[:, 1], metrics[:, 2] + metrics[:, 3], rtol=1e-5)
        np.testing.assert_array_equal(metrics[:, 4], 0)

    def test_regularizer(self):
        cfg = TrainConfig(regularizer=True, debug=True, epochs=1, batch_size=10, seed=1)
        result = training.train(small_net(), self.data, cfg)
        metrics = np.array(result.metrics)
        self.assertTrue(np.all(metrics[:, 4] > 0))
        np.testing.assert_allclose(metrics[:, 1], metrics[:, 2] + metrics[:, 3] + metrics[:, 4], rtol=1e-5)

    def test_conditional(self):
        net = small_net(kind="conditional")
        with self.assertRaises(ValueError):
            training.train(net, self.data, TrainConfig(epochs=1))
        result = training.train(net, self.data, TrainConfig(epochs=1, batch_size=20), mask_spec=MaskSpec("quadrants", 0))
        self.assertEqual(len(result.metrics), 2)

    def test_run_dir(self):
        with tempfile.TemporaryDirectory() as tmp:
            training.train(small_net(), self.data, TrainConfig(checkpoint_stride=4, **self.cfg), run_dir=tmp)
            for name in ("metrics.csv", "timing.csv", "kl_profile.csv", "kl_profile.png", "validation.csv"):
                self.assertTrue(os.path.exists(os.path.join(tmp, name)), name)
            self.assertEqual(
                sorted(os.listdir(os.path.join(tmp, "checkpoints"))),
                ["ckpt_00000004.mtn", "ckpt_00000008.mtn", "final.mtn"],
            )
            rows = read_csv(os.path.join(tmp, "metrics.csv"))
            self.assertEqual(rows[0], ["update", "loss", "recon", "kl_total", "reg_term"])
            self.assertEqual(len(rows), 9)

    def test_threads_stopped_on_error(self):
        """A failing action still stops the worker threads"""
        executors = []

        def executor(*args, **kwargs):
            executors.append(ThreadPoolExecutor(*args, **kwargs))
            return executors[-1]

        cfg = TrainConfig(microbatches=2, threads=2, **self.cfg)
        with mock.patch.object(sgvb_update, "ThreadPoolExecutor", side_effect=executor):
            with mock.patch.object(MetricsAction, "run", side_effect=RuntimeError("disk full")):
                with self.assertRaises(RuntimeError):
                    training.train(small_net(), self.data, cfg)
        self.assertEqual(len(executors), 1)
        with self.assertRaises(RuntimeError):
            executors[0].submit(int)

    def test_resume(self):
        """A resumed run continues where the interrupted one stopped"""
        with tempfile.TemporaryDirectory() as tmp:
            full = training.train(small_net(), self.data, TrainConfig(**self.cfg))
            first = dict(self.cfg, epochs=1)
            training.train(small_net(), self.data, TrainConfig(**first), run_dir=tmp)
            resumed = training.train(small_net(), self.data, TrainConfig(**self.cfg), run_dir=tmp, resume=True)
            self.assertEqual([row[0] for row in resumed.metrics], [5, 6, 7, 8])
            np.testing.assert_allclose(np.array(resumed.metrics), np.array(full.metrics)[4:], rtol=1e-3)
            rows = read_csv(os.path.join(tmp, "metrics.csv"))
            self.assertEqual([int(r[0]) for r in rows[1:]], list(range(1, 9)))
        with self.assertRaises(FileNotFoundError):
            training.train(small_net(), self.data, TrainConfig(**self.cfg), run_dir=tmp, resume=True)


@unittest.skipUnless(SLOW, "set MATNET_SLOW to run the learning tests")
class LearningTest(unittest.TestCase):
    """Longer runs checking that the models actually learn"""

    def test_beats_baseline(self):
        d = data.synthetic_patterns(512, 8, rng=Rng(0))
        train, val = d.split(0.2, seed=0)
        net = small_net(channels=[8, 8])
        training.train(net, train, TrainConfig(epochs=20, batch_size=32, lr=2e-3, val_fraction=0.0))
        baseline = training.marginal_bernoulli_nll(train.images, val.images)
        nll_1 = float(np.mean(training.validation_nll(net, val, 1, 0)))
        nll_20 = float(np.mean(training.validation_nll(net, val, 20, 0)))
        self.assertLess(nll_20, 0.9 * baseline)
        self.assertLessEqual(nll_20, nll_1)

    def test_mixture_separates_patterns(self):
        """The two mixture components pick up the two base patterns"""

        def separated(assignments: np.ndarray, labels: np.ndarray) -> bool:
            majority = []
            for label in (0, 1):
                counts = np.bincount(assignments[labels == label], minlength=2)
                if counts.max() < 0.9 * counts.sum():
                    return False
                majority.append(int(np.argmax(counts)))
            return majority[0] != majority[1]

        passed = 0
        for seed in (0, 1, 2):
            d = data.synthetic_patterns(512, 8, rng=Rng(seed))
            net = small_net(seed, prior="mixture", mixture_components=2)
            cfg = TrainConfig(epochs=20, batch_size=32, lr=2e-3, entropy_weight=0.05, val_fraction=0.0, seed=seed)
            training.train(net, d, cfg)
            passed += separated(net.mixture_assignments(Observation(d.images)), d.labels)
        self.assertGreaterEqual(passed, 2)

    def test_regularizer_gap(self):
        """Training q on model samples narrows the gap between training and validation bound"""
        smaller = 0
        for seed in (0, 1, 2):
            d = data.synthetic_patterns(264, 8, rng=Rng(seed))
            train, val = d.split(0.75, seed=seed)
            gaps = []
            for regularizer in (False, True):
                net = small_net(seed)
                cfg = dict(epochs=60, batch_size=16, lr=2e-3, val_fraction=0.0, seed=seed)
                training.train(net, train, TrainConfig(regularizer=regularizer, **cfg))
                nll_train = float(np.mean(training.validation_nll(net, train, 10, seed)))
                nll_val = float(np.mean(training.validation_nll(net, val, 10, seed)))
                gaps.append(nll_val - nll_train)
            smaller += gaps[1] < gaps[0]
        self.assertGreaterEqual(smaller, 2)

    def test_quadrant_task(self):
        """A conditional model beats the per-pixel marginals on the unknown quadrants"""
        d = data.synthetic_patterns(512, 8, rng=Rng(0))
        train, val = d.split(0.2, seed=0)
        net = small_net(channels=[8, 8], kind="conditional")
        cfg = TrainConfig(epochs=20, batch_size=32, lr=2e-3, val_fraction=0.0)
        training.train(net, train, cfg, mask_spec=MaskSpec("quadrants", 0))
        nll = []
        for q_known in (1, 2, 3):
            nll.append(training.quadrant_task(net, val.images, q_known, Rng(q_known), k=20))
            baseline = training.quadrant_baseline(train.images, val.images, q_known, Rng(q_known))
            self.assertLess(nll[-1], baseline)
        self.assertGreater(nll[0], nll[1])
        self.assertGreater(nll[1], nll[2])


if __name__ == "__main__":
    unittest.main()
