import unittest

import numpy as np

from config import Settings
from errors import InfeasibleError
from fokker_planck import dirac_2d, evolve_2d
from grids import Grid1D
from measures import GridMeasure
from sb_dual import (SbDualState, SbInstance, build_sb_instance, jump_consistency, optimal_density_report,
                     sb_ascend, sb_dual_objective)
from svm_models import make_constant, make_heston


class TestSbDual(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.svm = make_constant(0.2, tau2=0.3, x0=1.0, y0=0.0)
        cls.xgrid = Grid1D.uniform(0.5, 1.5, 21)
        cls.ygrid = Grid1D.uniform(-1.0, 1.0, 5)
        cls.settings = Settings()
        point = GridMeasure.dirac(cls.xgrid, 1.0)
        base = build_sb_instance(cls.svm, point, point, cls.ygrid, 0.0, 0.5, 1.0, cls.settings)
        cls.base = base
        flow = evolve_2d(cls.svm, None, dirac_2d(base.grid2, 1.0, 0.0), base.tg, base.grid2, base.G)
        cls.mu1 = flow.marginal(base.tg.jump_index)
        cls.mu2 = flow.marginal(-1)

    def _instance(self, mu1, mu2):
        b = self.base
        return SbInstance(self.svm, mu1, mu2, b.grid2, b.tg, b.G, b.boundary)

    def test_reference_marginals_cost_nothing(self):
        inst = self._instance(self.mu1, self.mu2)
        state = sb_ascend(SbDualState.zeros(self.xgrid), inst, self.settings)
        self.assertEqual(state.status, "converged")
        self.assertAlmostEqual(state.dual_value, 0.0, places=12)
        self.assertEqual(state.entropy, 0.0)

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(4)
        u1 = 0.1 * rng.normal(size=21)
        u2 = 0.1 * rng.normal(size=21)
        b = self.base
        v, sol = sb_dual_objective(u1, u2, self.svm, self.mu1, self.mu2, b.grid2, b.tg, b.G)
        w, _ = sb_dual_objective(u1 + 0.3, u2 - 0.2, self.svm, self.mu1, self.mu2, b.grid2, b.tg, b.G)
        self.assertAlmostEqual(v, w, places=10)
        self.assertLess(jump_consistency(sol), 1e-10)

    def test_unattainable_marginal_plateaus(self):
        point = GridMeasure.dirac(self.xgrid, 1.0)
        inst = self._instance(point, self.mu2)
        settings = Settings(potential_bound=0.5, lipschitz_bound=1.0, max_iters=200)
        state = sb_ascend(SbDualState.zeros(self.xgrid), inst, settings)
        self.assertEqual(state.status, "plateau")
        self.assertGreater(state.residual_norms()["T1"], 1e-3)
        self.assertIn("gap_bound", state.trace_frame().columns)

    def test_mean_mismatch(self):
        shifted = GridMeasure.dirac(self.xgrid, 1.1)
        with self.assertRaises(InfeasibleError):
            sb_ascend(SbDualState.zeros(self.xgrid), self._instance(shifted, self.mu2), self.settings)

    def test_density_report_for_zero_potentials(self):
        b = self.base
        _, sol = sb_dual_objective(np.zeros(21), np.zeros(21), self.svm, self.mu1, self.mu2,
                                   b.grid2, b.tg, b.G)
        report = optimal_density_report(sol, self.svm, b.tg, 2000, seed=0, energy=0.0, workers=2)
        self.assertEqual(report["density_mean"], 1.0)
        self.assertEqual(report["entropy_mc"], 0.0)
        self.assertEqual(report["portfolio_rms"], 0.0)
        self.assertTrue(report["finite_weights"])
        self.assertTrue(report["entropy_pass"])


class TestTiltedMarginals(unittest.TestCase):
    "Marges produites par un flot incliné : atteignables, la montée doit s'en approcher."

    @classmethod
    def setUpClass(cls):
        cls.svm = make_heston(1.5, 0.04, 0.3, 0.0, truncation=(0.01, 0.2))
        cls.xgrid = Grid1D.uniform(0.5, 1.5, 21)
        point = GridMeasure.dirac(cls.xgrid, 1.0)
        base = build_sb_instance(cls.svm, point, point, Grid1D.uniform(0.01, 0.2, 11),
                                 0.0, 0.5, 1.0, Settings())
        flow = evolve_2d(cls.svm, 0.5, dirac_2d(base.grid2, 1.0, 0.04), base.tg, base.grid2, base.G)
        cls.inst = SbInstance(cls.svm, flow.marginal(base.tg.jump_index), flow.marginal(-1),
                              base.grid2, base.tg, base.G, base.boundary)

    def test_ascent_reduces_residual_and_keeps_martingale(self):
        settings = Settings(tol=1e-4, plateau_patience=10, max_iters=300)
        state = sb_ascend(SbDualState.zeros(self.xgrid), self.inst, settings)
        self.assertIn(state.status, ("converged", "plateau"))
        first = max(state.history[0][3], state.history[0][4])
        self.assertGreater(first, settings.tol)
        self.assertLess(max(state.residual_norms().values()), first)
        values = [row[1] for row in state.history]
        self.assertTrue(np.all(np.diff(values) >= 0.0))
        np.testing.assert_allclose(state.flow.x_means(), 1.0, atol=1e-6)


if __name__ == "__main__":
    unittest.main()
