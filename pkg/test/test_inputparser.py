"""Tests of the configuration parser"""
import os
import tempfile
import unittest

from matnet import inputparser
from matnet.inputparser import Input, OptionError, SectionError

BASE = "scales = 14, 7\nmodules = 1, 1\nchannels = 8, 8\n"


class InputTest(unittest.TestCase):
    """Parsing of flat key = value configurations"""

    def test_minimal(self):
        inp = Input(text=BASE + "# comment\nimage_size = 28\n")
        self.assertEqual(inp.model["scales"], [14, 7])
        self.assertEqual(inp.model["image_size"], 28)
        self.assertIsNone(inp.train["epochs"])
        self.assertIsNone(inp.data["mask"])

    def test_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "config.txt")
            with open(path, "w", encoding="utf-8") as f:
                f.write(BASE + "lr = 0.001\n")
            self.assertEqual(Input(path).train["lr"], 0.001)
            with self.assertRaises(FileNotFoundError):
                Input(os.path.join(tmp, "missing.txt"))

    def test_missing(self):
        with self.assertRaises(OptionError) as context:
            Input(text="modules = 1\nchannels = 8\n")
        self.assertIn("scales", str(context.exception))

    def test_unknown(self):
        with self.assertRaises(OptionError) as context:
            Input(text=BASE + "learning_rate = 0.1\n")
        self.assertEqual(context.exception.key, "learning_rate")

    def test_section(self):
        with self.assertRaises(SectionError):
            Input(text=BASE + "[training]\nepochs = 3\n")
        with self.assertRaises(SectionError):
            Input(text="[matnet]\n" + BASE)

    def test_duplicate(self):
        with self.assertRaises(OptionError) as context:
            Input(text=BASE + "epochs = 3\nepochs = 4\n")
        self.assertIn("more than once", str(context.exception))

    def test_conversion(self):
        with self.assertRaises(OptionError):
            Input(text=BASE + "epochs = many\n")
        with self.assertRaises(OptionError):
            Input(text="scales = 14, x\nmodules = 1\nchannels = 8\n")

    def test_conditions(self):
        with self.assertRaises(OptionError):
            Input(text=BASE + "kind = joint\n")
        with self.assertRaises(OptionError):
            Input(text=BASE + "lr = -1\n")
        with self.assertRaises(OptionError):
            Input(text=BASE + "slope = 1.0\n")
        with self.assertRaises(OptionError):
            Input(text=BASE + "quadrants = 4\n")

    def test_bools(self):
        inp = Input(text=BASE + "ar_head = yes\nregularizer = false\ndequantize = 1\n")
        self.assertIs(inp.model["ar_head"], True)
        self.assertIs(inp.train["regularizer"], False)
        self.assertIs(inp.data["dequantize"], True)

    def test_overrides(self):
        inp = Input(text=BASE + "epochs = 3\n", overrides={"epochs": "5", "scales": "28, 14"})
        self.assertEqual(inp.train["epochs"], 5)
        self.assertEqual(inp.model["scales"], [28, 14])
        with self.assertRaises(OptionError):
            Input(text=BASE, overrides={"epoch": "5"})

    def test_shared_seed(self):
        options = Input(text=BASE + "seed = 7\n").options()
        self.assertEqual(options["seed"], 7)

    def test_to_text(self):
        options = inputparser.parse_text(BASE + "lr = 0.0002\nar_head = true\nprior = mixture\n")
        text = inputparser.to_text(options)
        self.assertIn("scales = 14, 7\n", text)
        self.assertIn("ar_head = true\n", text)
        self.assertNotIn("epochs", text)
        self.assertEqual(inputparser.parse_text(text), options)


if __name__ == "__main__":
    unittest.main()
