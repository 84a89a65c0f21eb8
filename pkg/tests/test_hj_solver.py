import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from config import Settings
from errors import CflError, GridError
from grids import Grid1D, Grid2D, TimeGrid
from hamiltonian import legendre, make_lagrangian
from hj_solver import (generator_matrix, mot_step, mot_time_grid, pair_stencil, solve_hj_mot, solve_hj_sb,
                       solve_hj_vix_post, stable_time_grid_2d)
from measures import GridMeasure
from mot_dual import build_instance
from svm_models import make_constant, make_heston


def cauchy_gaps(layers):
    """(|u_N - u_2N|, |u_2N - u_4N|) en norme sup sur les noeuds de la grille grossière."""
    picked = [layer[tuple(slice(None, None, 2**k) for _ in layer.shape)]
              for k, layer in enumerate(layers)]
    return (float(np.max(np.abs(picked[0] - picked[1]))),
            float(np.max(np.abs(picked[1] - picked[2]))))


class TestHjMot(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.grid = Grid1D.uniform(-3.0, 3.0, 41)
        cls.h = legendre(make_lagrangian("quadratic"), np.linspace(-1.0, 1.0, 2001), b_max=1.0,
                         n_b=4001, capped=True)
        cls.tg = TimeGrid(0.6, 0.5, 1.0, 4, 4)

    def test_affine_terminal_is_stationary(self):
        u2 = 0.3 * self.grid.nodes - 1.0
        sol = solve_hj_mot(self.h, None, u2, self.grid, self.tg)
        assert_allclose(sol.initial, u2, atol=1e-12)

    def test_quadratic_terminal(self):
        c = 0.2
        x = self.grid.nodes
        sol = solve_hj_mot(self.h, None, -c * x**2, self.grid, self.tg)
        expected = -c * x**2 - (1.0 - 0.6) * c**2 / 4.0
        inner = slice(10, 31)
        assert_allclose(sol.initial[inner], expected[inner], atol=1e-8)
        assert_array_equal(sol.terminal, -c * x**2)

    def test_cfl_violation(self):
        with self.assertRaises(CflError) as ctx:
            solve_hj_mot(self.h, None, -self.grid.nodes**2, self.grid, self.tg)
        self.assertAlmostEqual(ctx.exception.required_dt, 0.045, places=6)

    def test_unknown_boundary(self):
        with self.assertRaises(GridError):
            solve_hj_mot(self.h, None, np.zeros(41), self.grid, self.tg, boundary="periodic")

    def test_jump_is_exact(self):
        grid = self.grid
        mu = GridMeasure.dirac(grid, 0.0)
        for settings in (Settings(), Settings(mot_scheme="explicit", capped=True)):
            inst = build_instance(mu, mu, mu, 0.0, 0.5, 1.0, settings)
            j = inst.tg.jump_index
            for seed in range(20):
                with self.subTest(scheme=inst.scheme, seed=seed):
                    rng = np.random.default_rng(seed)
                    u1 = 0.01 * rng.normal(size=41)
                    u2 = 0.01 * rng.normal(size=41)
                    sol = solve_hj_mot(inst.h, u1, u2, grid, inst.tg, "absorbing", inst.scheme)
                    self.assertLess(sol.metadata["jump_residual"], 1e-15)
                    assert_array_equal(sol.values[j], u1 + sol.after_jump)
                    self.assertLessEqual(sol.metadata["cfl"], 1.0 + 1e-12)

    def test_envelope_has_no_cfl(self):
        # même donnée que test_cfl_violation : b* = 1/2 partout, u perd dt/4 par pas
        x = self.grid.nodes
        sol = solve_hj_mot(self.h, None, -x**2, self.grid, self.tg, scheme="envelope")
        self.assertEqual(sol.metadata["scheme"], "envelope")
        self.assertEqual(sol.metadata["boundary"], "absorbing")
        inner = slice(10, 31)
        assert_allclose(sol.initial[inner], -x[inner] ** 2 - 0.1, atol=1e-10)
        self.assertEqual(len(sol.kernels), self.tg.n_steps)
        self.assertTrue(np.all(sol.controls >= 0.0))
        for K in sol.kernels:
            K = K.toarray()
            assert_allclose(K.sum(axis=1), 1.0, atol=1e-12)
            assert_allclose(K @ x, x, atol=1e-12)

    def test_envelope_keeps_affine_terminal(self):
        u2 = 0.3 * self.grid.nodes - 1.0
        sol = solve_hj_mot(self.h, None, u2, self.grid, self.tg, scheme="envelope")
        assert_allclose(sol.initial, u2, atol=1e-10)
        assert_allclose(mot_step(self.h, self.grid, u2, 0.1, scheme="envelope"), u2, atol=1e-10)

    def test_pair_stencil(self):
        grid = Grid1D([-1.0, 0.0, 2.0])
        st = pair_stencil(grid)
        self.assertIs(pair_stencil(grid), st)
        # noeud 1 : paires (0,1) (0,2) (1,1) (1,2)
        self.assertAlmostEqual(float(st.variance[1].max()), 2.0)
        self.assertEqual(float(st.variance[0].max()), 0.0)
        x = grid.nodes
        mean = (1.0 - st.p_right) * x[st.left] + st.p_right * x[st.right]
        assert_allclose(mean, np.broadcast_to(x[:, None], mean.shape), atol=1e-15)

    def test_refinement_is_cauchy(self):
        h = legendre(make_lagrangian("quadratic"), np.linspace(-4.0, 4.0, 4001), b_max=4.0,
                     n_b=4001, capped=True)
        grid = Grid1D.uniform(-3.0, 3.0, 21)
        tg = TimeGrid(0.6, 0.5, 1.0, 4, 4)
        layers = []
        for k in range(3):
            fine = grid.refined(2**k)
            sol = solve_hj_mot(h, None, np.cos(fine.nodes), fine, tg.refined(4**k))
            layers.append(sol.initial)
        first, second = cauchy_gaps(layers)
        self.assertGreater(second, 0.0)
        self.assertGreaterEqual(first / second, 1.5)

    def test_time_grid_respects_cfl(self):
        tg = mot_time_grid(self.h, self.grid, 0.0, 0.5, 1.0, safety=0.9)
        self.assertTrue(tg.has_jump)
        self.assertLessEqual(float(np.max(tg.dt)) * self.h.b_sup / 0.0225, 0.9 + 1e-9)


class TestGenerator(unittest.TestCase):
    def test_rows_and_martingale(self):
        svm = make_heston(1.5, 0.04, 0.3, -0.5, truncation=(0.01, 0.2))
        grid2 = Grid2D(Grid1D.uniform(0.5, 1.5, 21), Grid1D.uniform(0.01, 0.2, 11))
        G, _ = generator_matrix(svm, grid2)
        self.assertLess(float(np.abs(G.sum(axis=1)).max()), 1e-10)
        P, _ = grid2.mesh()
        scale = float(np.abs(G).max())
        self.assertLess(float(np.abs(G @ P.ravel()).max()), 1e-12 * scale)

    def test_sb_linear_terminal(self):
        svm = make_heston(1.5, 0.04, 0.3, 0.0, truncation=(0.01, 0.2))
        grid2 = Grid2D(Grid1D.uniform(0.5, 1.5, 21), Grid1D.uniform(0.01, 0.2, 11))
        tg, G = stable_time_grid_2d(svm, grid2, 0.0, 0.5, 1.0, grad_bound=10.0, boundary="absorbing")
        x = grid2.first.nodes
        sol = solve_hj_sb(svm, np.zeros(21), x, grid2, tg, "absorbing", G)
        assert_allclose(sol.initial, np.broadcast_to(x[:, None], grid2.shape), atol=1e-10)
        self.assertEqual(sol.metadata["jump_residual"], 0.0)

    def test_sb_refinement_is_cauchy(self):
        svm = make_heston(1.5, 0.04, 0.1, 0.0, truncation=(0.01, 0.2))
        grid2 = Grid2D(Grid1D.uniform(0.5, 1.5, 11), Grid1D.uniform(0.01, 0.2, 5))
        tg, _ = stable_time_grid_2d(svm, grid2, 0.6, 0.5, 1.0, grad_bound=10.0)
        layers = []
        for k in range(3):
            fine = Grid2D(grid2.first.refined(2**k), grid2.second.refined(2**k))
            x = fine.first.nodes
            sol = solve_hj_sb(svm, np.zeros(len(x)), 0.5 * np.sin(3.0 * x), fine, tg.refined(4**k))
            layers.append(sol.initial)
        first, second = cauchy_gaps(layers)
        self.assertGreater(second, 0.0)
        self.assertGreaterEqual(first / second, 1.5)


class TestVixPost(unittest.TestCase):
    def test_closed_form_constant_volatility(self):
        s, tau = 0.2, 0.5
        svm = make_constant(s, tau2=0.3)
        wgrid = Grid1D.uniform(-1.0, 1.0, 21)
        ygrid = Grid1D.uniform(-1.0, 1.0, 5)
        tg, G = stable_time_grid_2d(svm, Grid2D(wgrid, ygrid, "w"), 0.0, 0.5, 1.0, grad_bound=10.0,
                                    boundary="linear")
        for delta in (-1.0, 0.5):
            sol = solve_hj_vix_post(svm, np.zeros(21), delta, wgrid, ygrid, tg, "linear", G=G)
            expected = -delta * wgrid.nodes + delta * s**2 * tau / 2.0
            assert_allclose(sol.initial, np.broadcast_to(expected[:, None], sol.initial.shape), atol=1e-10)
            self.assertEqual(sol.metadata["delta"], delta)

    def test_refinement_is_cauchy(self):
        svm = make_heston(1.5, 0.04, 0.1, 0.0, truncation=(0.01, 0.2))
        wgrid = Grid1D.uniform(-0.5, 0.5, 11)
        ygrid = Grid1D.uniform(0.01, 0.2, 5)
        tg, _ = stable_time_grid_2d(svm, Grid2D(wgrid, ygrid, "w"), 0.0, 0.5, 1.0, grad_bound=10.0)
        layers = []
        for k in range(3):
            sol = solve_hj_vix_post(svm, np.sqrt, 0.5, wgrid.refined(2**k), ygrid.refined(2**k),
                                    tg.refined(4**k))
            layers.append(sol.initial)
        first, second = cauchy_gaps(layers)
        self.assertGreater(second, 0.0)
        self.assertGreaterEqual(first / second, 1.5)


if __name__ == "__main__":
    unittest.main()
