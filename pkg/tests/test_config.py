import json
import os
import tempfile
import unittest

from config import Settings, load_config, load_instance, validate_instance
from errors import CalibrationError, DomainError


class TestConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _write(self, name, data):
        path = os.path.join(self.tmp.name, name)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh)
        return path

    def test_defaults(self):
        settings = load_config()
        self.assertEqual(settings, Settings())
        self.assertEqual(settings.n_x, 41)
        self.assertFalse(settings.capped)
        self.assertEqual(settings.mot_scheme, "envelope")
        self.assertEqual(settings.ascent, "lbfgs")

    def test_file_then_overrides(self):
        path = self._write("conf.json", {"n_x": 11, "tol": 1e-4})
        settings = load_config(path, {"tol": 1e-8, "seed": None})
        self.assertEqual(settings.n_x, 11)
        self.assertEqual(settings.tol, 1e-8)
        self.assertEqual(settings.seed, 0)

    def test_rejects_unknown_and_bad_values(self):
        with self.assertRaises(CalibrationError):
            load_config(overrides={"n_xx": 3})
        with self.assertRaises(CalibrationError):
            load_config(overrides={"tol": -1.0})
        with self.assertRaises(CalibrationError):
            load_config(overrides={"boundary": "periodic"})
        with self.assertRaises(CalibrationError):
            load_config(overrides={"mot_scheme": "implicit"})
        with self.assertRaises(CalibrationError):
            load_config(overrides={"ascent": "newton"})
        with self.assertRaises(CalibrationError):
            load_config(overrides={"transitions": "full"})

    def test_instance_validation(self):
        path = self._write("mot.json", {"kind": "mot", "mu0": {}, "mu1": None, "mu2": {},
                                        "T0": 0, "T1": 0.5, "T2": 1})
        self.assertEqual(load_instance(path)["kind"], "mot")
        with self.assertRaises(DomainError):
            validate_instance({"kind": "heston"})
        with self.assertRaises(DomainError):
            validate_instance({"kind": "sb", "model": {}})
        with self.assertRaises(DomainError):
            load_instance(os.path.join(self.tmp.name, "absent.json"))


if __name__ == "__main__":
    unittest.main()
