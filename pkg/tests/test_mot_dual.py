import time
import unittest

import numpy as np
from numpy.testing import assert_allclose

from config import Settings
from errors import DomainError, InfeasibleError
from fokker_planck import evolve_1d, evolve_kernels
from grids import Grid1D, TimeGrid
from measures import GridMeasure
from mot_dual import (DualState, a_range, ascend, build_instance, certify_supersolution, cfl_cap,
                      dual_objective, envelope_residual, extract_optimal_diffusion, observed_rate,
                      potential_to_slopes, project_potential, slope_gradient, slopes_to_potential,
                      two_marginal_instance, variance_cap)
from primal_oracle import matched_instance, matched_oracle, solve_discrete_mot

EXPLICIT = dict(mot_scheme="explicit", capped=True, ascent="supergradient")


def toy_instance(settings=None):
    """Trois noeuds, mu0 = delta_0, mu2 = (delta_-1 + delta_1)/2, un pas de longueur 1."""
    settings = settings or Settings(steps_t2=1, **EXPLICIT)
    grid = Grid1D([-1.0, 0.0, 1.0])
    mu0 = GridMeasure(grid, [0.0, 1.0, 0.0])
    mu2 = GridMeasure(grid, [0.5, 0.0, 0.5])
    return build_instance(mu0, None, mu2, 1.0, 0.5, 2.0, settings, n_b=64 * 62 + 1), settings


def random_flow(grid, tg, cap, rng, spec):
    "Marges atteignables : flot explicite piloté par un b aléatoire sous la CFL."
    b = rng.uniform(0.0, cap, size=(tg.n_steps, len(grid)))
    flow = evolve_1d(b, GridMeasure.dirac(grid, 0.0), tg, spec)
    return GridMeasure(grid, flow.masses[tg.jump_index]), GridMeasure(grid, flow.masses[-1])


class TestMotDual(unittest.TestCase):
    def test_identical_marginals(self):
        mu = GridMeasure.dirac(Grid1D.uniform(-3.0, 3.0, 41), 0.0)
        for settings in (Settings(), Settings(**EXPLICIT)):
            with self.subTest(scheme=settings.mot_scheme):
                inst = build_instance(mu, mu, mu, 0.0, 0.5, 1.0, settings)
                state = ascend(DualState.zeros(inst.grid), inst, settings)
                self.assertEqual(state.status, "converged")
                self.assertEqual(state.iterations, 0)
                self.assertAlmostEqual(state.dual_value, 0.0, places=12)

    def test_reversed_order_is_infeasible(self):
        settings = Settings(steps_t2=1)
        grid = Grid1D([-1.0, 0.0, 1.0])
        spread = GridMeasure(grid, [0.5, 0.0, 0.5])
        point = GridMeasure(grid, [0.0, 1.0, 0.0])
        inst = build_instance(spread, None, point, 1.0, 0.5, 2.0, settings)
        with self.assertRaises(InfeasibleError) as ctx:
            ascend(DualState.zeros(grid), inst, settings)
        self.assertEqual(ctx.exception.report["pair"], ["mu0", "mu2"])

    def test_two_marginal_branch(self):
        settings = Settings(steps_t2=1)
        grid = Grid1D([-1.0, 0.0, 1.0])
        point = GridMeasure(grid, [0.0, 1.0, 0.0])
        spread = GridMeasure(grid, [0.5, 0.0, 0.5])
        inst = two_marginal_instance(point, spread, 1.0, 0.5, 2.0, settings)
        self.assertIsNone(inst.mu1)
        self.assertFalse(inst.tg.has_jump)
        with self.assertRaises(DomainError):
            two_marginal_instance(point, spread, 0.5, 0.5, 2.0, settings)

    def test_toy_gap_closes(self):
        inst, settings = toy_instance()
        self.assertTrue(inst.two_marginal)
        self.assertAlmostEqual(cfl_cap(inst.grid, inst.tg), 1.0)
        self.assertAlmostEqual(a_range(inst.grid, 10.0), 21.0)
        state = ascend(DualState.zeros(inst.grid), inst, settings)
        self.assertIn(state.status, ("converged", "plateau"))
        primal = solve_discrete_mot(matched_instance(inst, 64)).value
        self.assertAlmostEqual(primal, 1.0, places=9)
        self.assertLessEqual(state.dual_value, primal + 1e-9)
        self.assertLess(primal - state.dual_value, 1e-4)
        values = [row[1] for row in state.history]
        self.assertTrue(all(b >= a for a, b in zip(values, values[1:])))
        self.assertEqual(list(state.trace_frame().columns),
                         ["iteration", "value", "residual_T1", "residual_T2", "step"])

    def test_toy_envelope_lbfgs(self):
        inst, settings = toy_instance(Settings(steps_t2=1))
        self.assertEqual(inst.scheme, "envelope")
        self.assertAlmostEqual(variance_cap(inst.grid, inst.tg), 1.0)
        state = ascend(DualState.zeros(inst.grid), inst, settings)
        self.assertLessEqual(state.iterations, settings.max_iters)
        oracle, result = matched_oracle(inst, observed_rate(state))
        self.assertEqual(oracle.transitions, "full")
        self.assertAlmostEqual(result.value, 1.0, places=9)
        self.assertLessEqual(state.dual_value, result.value + 1e-9)
        self.assertLess(result.value - state.dual_value, 1e-3)
        values = [row[1] for row in state.history]
        self.assertTrue(all(b >= a - 1e-12 for a, b in zip(values, values[1:])))

    def test_uncapped_explicit_table_is_not_truncated(self):
        settings = Settings(mot_scheme="explicit", steps_t2=1, n_a=201, n_b=401)
        self.assertFalse(settings.capped)
        grid = Grid1D.uniform(-1.0, 1.0, 5)
        mu0 = GridMeasure.dirac(grid, 0.0)
        mu2 = GridMeasure.from_atoms(grid, [-1.0, 1.0])
        inst = build_instance(mu0, None, mu2, 1.0, 0.5, 2.0, settings)
        self.assertFalse(inst.h.capped)
        self.assertGreater(inst.h.b_grid[-1], inst.h.b_sup)
        self.assertGreater(inst.h.b_sup, cfl_cap(grid, TimeGrid(1.0, 0.5, 2.0, 1, 1)))
        self.assertLessEqual(float(np.max(inst.tg.dt)) * inst.h.b_sup / 0.25, settings.cfl_safety + 1e-9)

    def test_weak_duality_on_attainable_marginals(self):
        grid = Grid1D.uniform(-1.5, 1.5, 7)
        mu0 = GridMeasure.dirac(grid, 0.0)
        for settings in (Settings(steps_t1=2, steps_t2=2), Settings(steps_t1=2, steps_t2=2, **EXPLICIT)):
            base = build_instance(mu0, mu0, mu0, 0.0, 0.5, 1.0, settings, n_b=16 * 250 + 1)
            cap = cfl_cap(grid, base.tg)
            for seed in range(50):
                with self.subTest(scheme=settings.mot_scheme, seed=seed):
                    rng = np.random.default_rng(seed)
                    mu1, mu2 = random_flow(grid, base.tg, cap, rng, base.h.lagrangian)
                    inst = build_instance(mu0, mu1, mu2, 0.0, 0.5, 1.0, settings, n_b=16 * 250 + 1)
                    primal = solve_discrete_mot(matched_instance(inst, 16)).value
                    u1 = 0.5 * rng.normal(size=len(grid))
                    u2 = 0.5 * rng.normal(size=len(grid))
                    value, _ = dual_objective(u1, u2, mu0, mu1, mu2, inst.h, grid, inst.tg,
                                              "absorbing", inst.scheme)
                    self.assertLessEqual(value, primal + 1e-6)

    def test_dual_is_shift_invariant(self):
        grid = Grid1D.uniform(-1.5, 1.5, 7)
        mu0 = GridMeasure.dirac(grid, 0.0)
        settings = Settings(steps_t1=2, steps_t2=2)
        base = build_instance(mu0, mu0, mu0, 0.0, 0.5, 1.0, settings)
        rng = np.random.default_rng(5)
        mu1, mu2 = random_flow(grid, base.tg, cfl_cap(grid, base.tg), rng, base.h.lagrangian)
        inst = build_instance(mu0, mu1, mu2, 0.0, 0.5, 1.0, settings)
        u1, u2 = rng.normal(size=7), rng.normal(size=7)
        args = (mu0, mu1, mu2, inst.h, grid, inst.tg, "absorbing", "envelope")
        value, _ = dual_objective(u1, u2, *args)
        shifted, _ = dual_objective(u1 + 0.7, u2 - 1.3, *args)
        self.assertAlmostEqual(value, shifted, places=9)


class TestReferenceInstance(unittest.TestCase):
    """mu0 = delta_0, mu1 = mu2 = (delta_-1 + delta_1)/2, L = b², 41 noeuds sur [-3, 3]."""

    def test_gap_within_five_percent(self):
        settings = Settings()
        grid = Grid1D.uniform(-3.0, 3.0, 41)
        mu0 = GridMeasure.dirac(grid, 0.0)
        mu1 = GridMeasure.from_atoms(grid, [-1.0, 1.0])
        inst = build_instance(mu0, mu1, mu1, 0.0, 0.5, 1.0, settings)
        start = time.perf_counter()
        state = ascend(DualState.zeros(grid), inst, settings)
        elapsed = time.perf_counter() - start
        self.assertLessEqual(state.iterations, 500)
        self.assertLess(elapsed, 120.0)
        oracle, result = matched_oracle(inst, observed_rate(state), settings.lp_segments, settings.lp_tol)
        self.assertEqual(oracle.transitions, "full")
        self.assertLessEqual(state.dual_value, result.value + 1e-6)
        self.assertLessEqual((result.value - state.dual_value) / result.value, 0.05)
        assert_allclose(state.flow.x_means(), 0.0, atol=1e-12)


class TestDualHelpers(unittest.TestCase):
    def setUp(self):
        self.grid = Grid1D.uniform(-3.0, 3.0, 41)
        mu0 = GridMeasure.dirac(self.grid, 0.0)
        mu1 = GridMeasure.discretized_normal(self.grid, 0.0, 0.05)
        mu2 = GridMeasure.discretized_normal(self.grid, 0.0, 0.1)
        self.explicit = build_instance(mu0, mu1, mu2, 0.0, 0.5, 1.0, Settings(**EXPLICIT))
        self.envelope = build_instance(mu0, mu1, mu2, 0.0, 0.5, 1.0, Settings())
        rng = np.random.default_rng(8)
        self.u1 = 0.01 * rng.normal(size=41)
        self.u2 = 0.01 * rng.normal(size=41)

    def test_projection(self):
        rng = np.random.default_rng(0)
        u = project_potential(rng.normal(size=41) * 5, self.grid, bound=1.0, lipschitz=2.0)
        self.assertLessEqual(np.abs(u).max(), 1.0)
        self.assertLessEqual(np.abs(np.diff(u) / self.grid.steps).max(), 2.0 + 1e-9)
        smooth = 0.1 * np.sin(self.grid.nodes)
        smooth -= 0.5 * (smooth.max() + smooth.min())
        assert_allclose(project_potential(smooth, self.grid, 1.0, 2.0), smooth, atol=1e-12)

    def test_slope_parametrisation(self):
        rng = np.random.default_rng(1)
        steps = self.grid.steps
        u = rng.normal(size=41)
        assert_allclose(slopes_to_potential(potential_to_slopes(u, steps), steps), u, atol=1e-12)
        g = rng.normal(size=41)
        dz = 1e-3 * rng.normal(size=41)
        z = potential_to_slopes(u, steps)
        change = g @ (slopes_to_potential(z + dz, steps) - slopes_to_potential(z, steps))
        self.assertAlmostEqual(change, slope_gradient(g, steps) @ dz, places=12)

    def test_envelope_and_supersolution(self):
        # écart de table : nul pour le schéma explicite, O(pas en b au carré) sinon
        for inst, slack in ((self.explicit, 1e-9), (self.envelope, 1e-4)):
            with self.subTest(scheme=inst.scheme):
                value, sol = dual_objective(self.u1, self.u2, inst.mu0, inst.mu1, inst.mu2, inst.h,
                                            inst.grid, inst.tg, "absorbing", inst.scheme)
                if inst.scheme == "envelope":
                    flow = evolve_kernels(sol, inst.mu0, inst.h.lagrangian)
                else:
                    flow = evolve_1d(sol.controls, inst.mu0, inst.tg, inst.h.lagrangian)
                gap = envelope_residual(sol, flow, self.u1, self.u2, inst.mu0)
                self.assertLessEqual(gap, slack)
                self.assertGreater(gap, -1e-2)
                ok, worst, _ = certify_supersolution(sol, inst.h)
                self.assertTrue(ok)
                self.assertLess(worst, 1e-8)
                b = extract_optimal_diffusion(sol, inst.h)
                self.assertTrue(np.all(b >= 0))
                assert_allclose(b[:, [0, -1]], 0.0)

    def test_supersolution_detects_perturbation(self):
        inst = self.envelope
        _, sol = dual_objective(self.u1, self.u2, inst.mu0, inst.mu1, inst.mu2, inst.h,
                                inst.grid, inst.tg, "absorbing", "envelope")
        sol.values[1, 20] += 1e-3
        ok, worst, where = certify_supersolution(sol, inst.h)
        self.assertFalse(ok)
        self.assertEqual(where, (1, 20))
        self.assertGreater(worst, 1e-3)

    def test_envelope_flow_is_a_martingale(self):
        inst = self.envelope
        state = ascend(DualState(self.u1, self.u2), inst, Settings(max_iters=0))
        assert_allclose(state.flow.x_means(), 0.0, atol=1e-12)
        assert_allclose(state.flow.masses.sum(axis=1), 1.0, atol=1e-12)
        self.assertGreaterEqual(observed_rate(state), 0.0)


if __name__ == "__main__":
    unittest.main()
