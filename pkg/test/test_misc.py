import os
import tempfile
import unittest

import numpy as np

from matnet.helpers import misc


class MiscTest(unittest.TestCase):
    """Test the output file helpers"""

    def test_format_row(self):
        self.assertEqual(misc.format_row([3, 0.1, np.float32(2.5), "x"]), "3,0.1,2.5,x")
        self.assertEqual(misc.format_row([1 / 3]), "0.3333333333")

    def test_files(self):
        """Backups keep all earlier versions of a file"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.csv")
            misc.initialize_file(path, ["update", "loss"])
            misc.append_rows(path, [[1, 0.5], [2, 0.25]])
            self.assertEqual(misc.read_csv(path), [["update", "loss"], ["1", "0.5"], ["2", "0.25"]])
            misc.initialize_file(path, ["update"])
            misc.initialize_file(path, ["step"])
            self.assertEqual(sorted(os.listdir(tmp)), ["bck.0.metrics.csv", "bck.1.metrics.csv", "metrics.csv"])
            self.assertEqual(misc.read_csv(os.path.join(tmp, "bck.1.metrics.csv")), [["update"]])


if __name__ == "__main__":
    unittest.main()
