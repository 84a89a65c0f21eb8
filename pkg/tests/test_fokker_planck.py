import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from errors import CflError, DomainError
from fokker_planck import dirac_2d, evolve_1d, evolve_2d, evolve_kernels, simulate
from grids import Grid1D, Grid2D, TimeGrid
from hamiltonian import legendre, make_lagrangian
from hj_solver import solve_hj_mot, stable_time_grid_2d
from measures import GridMeasure, convex_order
from svm_models import make_constant, make_heston


class TestEvolve1d(unittest.TestCase):
    def setUp(self):
        self.grid = Grid1D.uniform(-3.0, 3.0, 41)
        self.tg = TimeGrid(0.0, 0.5, 1.0, 4, 4)
        self.spec = make_lagrangian("quadratic")
        self.m0 = GridMeasure.discretized_normal(self.grid, 0.0, 0.3)
        self.cap = 0.15**2 / 0.125

    def test_mass_mean_and_order(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            b = rng.uniform(0.0, self.cap, size=(8, 41))
            flow = evolve_1d(b, self.m0, self.tg, self.spec)
            assert_allclose(flow.masses.sum(axis=1), 1.0, atol=1e-12)
            means = flow.masses @ self.grid.nodes
            assert_allclose(means, means[0], atol=1e-12)
            self.assertGreaterEqual(flow.cost, 0.0)
            for k in range(8):
                self.assertTrue(convex_order(flow.marginal(k), flow.marginal(k + 1)))

    def test_zero_diffusion_is_static(self):
        flow = evolve_1d(0.0, self.m0, self.tg, self.spec)
        assert_allclose(flow.masses[-1], self.m0.weights, atol=1e-15)
        self.assertEqual(flow.cost, 0.0)

    def test_cfl_and_sign(self):
        with self.assertRaises(CflError):
            evolve_1d(10.0 * self.cap, self.m0, self.tg, self.spec)
        with self.assertRaises(DomainError):
            evolve_1d(-0.1, self.m0, self.tg, self.spec)


class TestEvolveKernels(unittest.TestCase):
    def setUp(self):
        self.grid = Grid1D.uniform(-3.0, 3.0, 41)
        self.spec = make_lagrangian("quadratic")
        self.h = legendre(self.spec, np.linspace(-1.0, 1.0, 2001), b_max=1.0, n_b=4001, capped=True)
        self.tg = TimeGrid(0.6, 0.5, 1.0, 4, 4)
        self.m0 = GridMeasure.discretized_normal(self.grid, 0.0, 0.3)

    def test_variance_grows_by_dt_b(self):
        x = self.grid.nodes
        sol = solve_hj_mot(self.h, None, -0.2 * x**2 + 0.1 * np.sin(x), self.grid, self.tg,
                           scheme="envelope")
        flow = evolve_kernels(sol, self.m0, self.spec)
        assert_allclose(flow.masses.sum(axis=1), 1.0, atol=1e-12)
        assert_allclose(flow.x_means(), flow.x_means()[0], atol=1e-12)
        variances = flow.masses @ x**2 - flow.x_means() ** 2
        expected = np.diff(self.tg.times) * np.einsum("ki,ki->k", flow.masses[:-1], sol.controls)
        assert_allclose(np.diff(variances), expected, atol=1e-12)
        self.assertAlmostEqual(flow.cost, float(flow.running.sum()), places=14)
        self.assertGreater(flow.cost, 0.0)

    def test_needs_kernels(self):
        sol = solve_hj_mot(self.h, None, np.zeros(41), self.grid, self.tg)
        with self.assertRaises(DomainError):
            evolve_kernels(sol, self.m0, self.spec)


class TestEvolve2d(unittest.TestCase):
    def test_constant_tilt_energy_and_martingale(self):
        svm = make_constant(0.2, tau2=0.3)
        grid2 = Grid2D(Grid1D.uniform(0.5, 1.5, 21), Grid1D.uniform(-1.0, 1.0, 5))
        tg, G = stable_time_grid_2d(svm, grid2, 0.0, 0.5, 1.0, grad_bound=10.0, boundary="absorbing")
        m0 = dirac_2d(grid2, 1.0, 0.0)
        flow = evolve_2d(svm, 0.5, m0, tg, grid2, G)
        self.assertAlmostEqual(flow.cost, 0.5 * 0.5**2 * 1.0, places=12)
        assert_allclose(flow.x_means(), 1.0, atol=1e-12)
        self.assertAlmostEqual(flow.marginal(-1).weights.sum(), 1.0, places=12)

    def test_heston_flow_keeps_mean(self):
        svm = make_heston(1.5, 0.04, 0.3, 0.0, truncation=(0.01, 0.2))
        grid2 = Grid2D(Grid1D.uniform(0.5, 1.5, 21), Grid1D.uniform(0.01, 0.2, 11))
        tg, G = stable_time_grid_2d(svm, grid2, 0.0, 0.5, 1.0, grad_bound=10.0, boundary="absorbing")
        rng = np.random.default_rng(5)
        alpha = rng.uniform(-1.0, 1.0, size=(tg.n_steps,) + grid2.shape)
        flow = evolve_2d(svm, alpha, dirac_2d(grid2, 1.0, 0.04), tg, grid2, G)
        assert_allclose(flow.x_means(), 1.0, atol=1e-12)
        self.assertGreater(flow.cost, 0.0)


class TestSimulate(unittest.TestCase):
    def setUp(self):
        self.svm = make_constant(0.2, tau2=0.3)
        self.tg = TimeGrid(0.0, 0.5, 1.0, 10, 10)

    def test_workers_do_not_change_paths(self):
        one = simulate(self.svm, 0.5, 20_000, self.tg, seed=7, chunk_size=4096, workers=1)
        four = simulate(self.svm, 0.5, 20_000, self.tg, seed=7, chunk_size=4096, workers=4)
        assert_array_equal(one.X, four.X)
        assert_array_equal(one.log_weight, four.log_weight)
        self.assertEqual(one.X.shape, (20_000, 3))

    def test_girsanov_entropy_of_constant_tilt(self):
        for c in (0.5, 1.0, 2.0):
            with self.subTest(c=c):
                paths = simulate(self.svm, c, 100_000, self.tg, seed=1, mode="tilted")
                ent, se = paths.entropy()
                self.assertLess(abs(ent - 0.5 * c**2), 3.0 * se + 1e-12)

    def test_reference_weights_average_to_one(self):
        paths = simulate(self.svm, 0.5, 20_000, self.tg, seed=2)
        mean, se = paths.mean_weight()
        self.assertLess(abs(mean - 1.0), 3.0 * se)

    def test_zero_control(self):
        paths = simulate(self.svm, None, 10_000, self.tg, seed=3)
        self.assertEqual(paths.entropy(), (0.0, 0.0))
        x = paths.X[:, -1]
        self.assertLess(abs(x.mean() - 1.0), 4.0 * x.std() / np.sqrt(x.size))
        hist = paths.histogram(self.tg.n_steps, Grid1D.uniform(0.5, 1.5, 21))
        self.assertAlmostEqual(hist.weights.sum(), 1.0, places=12)
        self.assertEqual(paths.summary()["n_paths"], 10_000)


if __name__ == "__main__":
    unittest.main()
