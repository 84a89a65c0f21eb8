import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from cli import check_schema, main
from errors import CalibrationError

TOY = {"kind": "mot", "grid": {"lo": -1.0, "hi": 1.0, "n": 3},
       "mu0": {"atoms": [0.0]}, "mu1": None, "mu2": {"atoms": [-1.0, 1.0]},
       "T0": 1.0, "T1": 0.5, "T2": 2.0}


class TestCli(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _json(self, name, data):
        path = self.tmp / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    def _read(self, out, name):
        return json.loads((self.tmp / out / name).read_text(encoding="utf-8"))

    def test_calibrate_identical_marginals(self):
        conf = {"kind": "mot", "grid": {"lo": -3.0, "hi": 3.0, "n": 41},
                "mu0": {"atoms": [0.0]}, "mu1": {"atoms": [0.0]}, "mu2": {"atoms": [0.0]},
                "T0": 0.0, "T1": 0.5, "T2": 1.0}
        out = str(self.tmp / "cal")
        code = main(["calibrate", "--instance", self._json("same.json", conf), "--out", out])
        self.assertEqual(code, 0)
        result = self._read("cal", "result.json")
        self.assertEqual(result["status"], "converged")
        self.assertAlmostEqual(result["dual_value"], 0.0, places=12)
        self.assertTrue((self.tmp / "cal" / "trace.csv").exists())

    def test_calibrate_reversed_order(self):
        conf = dict(TOY, mu0={"atoms": [-1.0, 1.0]}, mu2={"atoms": [0.0]})
        code = main(["calibrate", "--instance", self._json("rev.json", conf), "--out", str(self.tmp / "rev")])
        self.assertEqual(code, 3)
        error = self._read("rev", "error.json")
        self.assertEqual(error["exit_code"], 3)
        self.assertEqual(error["report"]["pair"], ["mu0", "mu2"])

    def test_verify_toy_is_reproducible(self):
        inst = self._json("toy.json", TOY)
        config = self._json("config.json", {"steps_t2": 1})
        texts = []
        for run in ("a", "b"):
            code = main(["verify", "--instance", inst, "--config", config, "--out", str(self.tmp / run)])
            self.assertEqual(code, 0)
            texts.append((self.tmp / run / "verify.json").read_bytes())
        report = json.loads(texts[0])
        self.assertTrue(report["pass"])
        self.assertAlmostEqual(report["primal"], 1.0, places=9)
        self.assertLessEqual(report["relative_gap"], 0.05)
        self.assertEqual(texts[0], texts[1])

    def test_verify_reference_instance(self):
        conf = {"kind": "mot", "grid": {"lo": -3.0, "hi": 3.0, "n": 41},
                "mu0": {"atoms": [0.0]}, "mu1": {"atoms": [-1.0, 1.0]}, "mu2": {"atoms": [-1.0, 1.0]},
                "T0": 0.0, "T1": 0.5, "T2": 1.0}
        code = main(["verify", "--instance", self._json("ref.json", conf), "--out", str(self.tmp / "ref")])
        self.assertEqual(code, 0)
        report = self._read("ref", "verify.json")
        self.assertTrue(report["pass"])
        self.assertEqual(report["scheme"], "envelope")
        self.assertEqual(report["transitions"], "full")
        self.assertLessEqual(report["relative_gap"], 0.05)

    def test_check_order(self):
        point = self._json("point.json", {"nodes": [-1.0, 0.0, 1.0], "weights": [0.0, 1.0, 0.0]})
        spread = self._json("spread.json", {"nodes": [-1.0, 0.0, 1.0], "weights": [0.5, 0.0, 0.5]})
        self.assertEqual(main(["check-order", "--measures", point, spread, "--out", str(self.tmp / "o1")]), 0)
        self.assertEqual(main(["check-order", "--measures", spread, point, "--out", str(self.tmp / "o2")]), 3)
        self.assertFalse(self._read("o2", "order.json")["passed"])

    def test_ingest(self):
        k = np.linspace(0.5, 1.5, 11)
        calls = self.tmp / "calls.csv"
        pd.DataFrame({"strike": k, "price": np.maximum(1.0 - k, 0.0)}).to_csv(calls, index=False)
        config = self._json("grid.json", {"x_lo": 0.0, "x_hi": 2.0, "n_x": 21})
        code = main(["ingest", "--calls", f"1.0:{calls}", "--config", config, "--out", str(self.tmp / "ing")])
        self.assertEqual(code, 0)
        report = self._read("ing", "ingest.json")
        self.assertAlmostEqual(report["measures"][0]["mean"], 1.0, places=9)
        self.assertTrue((self.tmp / "ing" / "mu_T1.json").exists())

        bad = self.tmp / "bad.csv"
        pd.DataFrame({"strike": [0.8, 0.9, 1.0, 1.1], "price": [0.2, 0.1, 0.15, 0.05]}).to_csv(bad, index=False)
        code = main(["ingest", "--calls", f"1.0:{bad}", "--config", config, "--out", str(self.tmp / "bad")])
        self.assertEqual(code, 4)
        self.assertEqual(self._read("bad", "error.json")["report"]["strike"], 1.0)

    def test_schema(self):
        with self.assertRaises(CalibrationError):
            check_schema({"command": "verify", "kind": "mot"}, "verify")
        check_schema({"command": "check-order", "pairs": [], "passed": True}, "check-order")


if __name__ == "__main__":
    unittest.main()
