import os
import tempfile
import unittest

import matplotlib

matplotlib.use("Agg")

import numpy as np

from matnet.actions import action, kl_profile
from matnet.archive import DataError


class ActionTest(unittest.TestCase):
    """Test Action class and functions of action module"""

    def test_action_class(self):
        """Test setting up the base class"""
        act = action.Action()
        with self.assertRaises(NotImplementedError):
            act.run(0)
        self.assertEqual(act.final_run(0), None)

    def test_stride_matches(self):
        """Actions with stride 0 never run, others on every multiple"""
        due = [step for step in range(1, 13) if action.stride_matches(step, 4)]
        self.assertEqual(due, [4, 8, 12])
        self.assertFalse(action.stride_matches(4, 0))
        self.assertFalse(action.stride_matches(4, None))


class KlProfileTest(unittest.TestCase):
    """Per layer KL tables, their files and plots"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.profile = kl_profile.KlProfile(["top", "fc", "7x7", "7x7"])
        for update in range(1, 6):
            self.profile.append(update, np.array([0.5, 1.0, 2.0, 0.25]) * update)

    def tearDown(self):
        self.tmp.cleanup()

    def test_table(self):
        self.assertEqual(self.profile.depth, 3)
        self.assertEqual(self.profile.table().shape, (5, 4))
        np.testing.assert_allclose(self.profile.totals(), 3.75 * np.arange(1, 6))
        self.assertEqual(self.profile.header(), ["update", "module_0", "module_1", "module_2", "module_3", "total"])
        with self.assertRaises(ValueError):
            self.profile.append(6, np.ones(3))

    def test_export(self):
        path = os.path.join(self.tmp.name, "kl.csv")
        kl_profile.kl_profile_export(self.profile, path)
        again = kl_profile.read_kl_profile(path, self.profile.labels)
        self.assertEqual(again.updates, self.profile.updates)
        np.testing.assert_allclose(again.table(), self.profile.table())
        with self.assertRaises(ValueError):
            kl_profile.kl_profile_export(kl_profile.KlProfile(["top"]), path)

    def test_read_errors(self):
        path = os.path.join(self.tmp.name, "bad.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("update,loss\n1,2\n")
        with self.assertRaises(DataError):
            kl_profile.read_kl_profile(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write("update,module_0,total\n1,2\n")
        with self.assertRaises(DataError):
            kl_profile.read_kl_profile(path)

    def test_merge(self):
        other = kl_profile.KlProfile(self.profile.labels)
        other.append(6, np.ones(4))
        self.profile.merge(other)
        self.assertEqual(len(self.profile), 6)
        with self.assertRaises(DataError):
            self.profile.merge(kl_profile.KlProfile(["top"]))

    def test_plot(self):
        path = os.path.join(self.tmp.name, "kl.png")
        self.profile.plot(path)
        self.profile.plot(path)
        self.assertTrue(os.path.exists(path))
        self.assertTrue(os.path.exists(os.path.join(self.tmp.name, "bck.0.kl.png")))


if __name__ == "__main__":
    unittest.main()
