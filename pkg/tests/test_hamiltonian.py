import unittest

import numpy as np
from numpy.testing import assert_allclose

from errors import DomainError, TableRangeError, TruncationError
from hamiltonian import (check_a2, double_transform, fenchel_young_gap, h_prime, legendre,
                         make_lagrangian, midpoint_convex)


class TestLagrangian(unittest.TestCase):
    def test_catalog_values(self):
        self.assertAlmostEqual(float(make_lagrangian("quadratic", gamma=2.0)(3.0)), 4.5)
        self.assertAlmostEqual(float(make_lagrangian("power", power=3.0)(2.0)), 8.0 / 3.0)
        self.assertAlmostEqual(float(make_lagrangian("entropic_like")(0.0)), 1.0)
        self.assertAlmostEqual(float(make_lagrangian("entropic_like")(1.0)), 0.0)

    def test_negative_b_rejected(self):
        with self.assertRaises(DomainError):
            make_lagrangian("quadratic")(-0.1)

    def test_non_convex_rejected(self):
        self.assertFalse(midpoint_convex(lambda b: np.sin(3.0 * b), 5.0))
        with self.assertRaises(DomainError):
            make_lagrangian("bumpy", evaluator=lambda b: np.sin(3.0 * b), b_max=5.0)
        with self.assertRaises(DomainError):
            make_lagrangian("cubic-ish")


class TestLegendre(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.L = make_lagrangian("quadratic")
        cls.h = legendre(cls.L, np.linspace(-4.0, 4.0, 2001), b_max=4.0, n_b=4001)

    def test_quadratic_closed_form(self):
        # L = b^2 : b* = -a/2 pour a <= 0, H = a^2/4
        a = np.array([-2.0, -1.0, 0.0, 1.0])
        assert_allclose(self.h(a), [1.0, 0.25, 0.0, 0.0], atol=1e-9)
        assert_allclose(self.h.b_star(a), [1.0, 0.5, 0.0, 0.0], atol=1e-9)
        assert_allclose(h_prime(self.h, -2.0), -1.0, atol=1e-9)

    def test_fenchel_young(self):
        self.assertGreaterEqual(fenchel_young_gap(self.h), -1e-10)

    def test_double_transform_recovers_cost(self):
        b = np.linspace(0.0, 1.5, 31)
        assert_allclose(double_transform(self.h, b), b**2, atol=1e-4)

    def test_chord_rate_between_neighbour_slopes(self):
        a = self.h.a_grid
        rate = self.h.chord_rate(0.5 * (a[1:] + a[:-1]))
        b = self.h.argmax
        self.assertTrue(np.all(rate >= np.minimum(b[1:], b[:-1]) - 1e-9))
        self.assertTrue(np.all(rate <= np.maximum(b[1:], b[:-1]) + 1e-9))
        self.assertAlmostEqual(float(self.h.chord_rate(-2.001)), 1.001, places=9)

    def test_out_of_table(self):
        with self.assertRaises(TableRangeError):
            self.h(np.array([-5.0]))

    def test_truncation(self):
        with self.assertRaises(TruncationError) as ctx:
            legendre(self.L, np.linspace(-4.0, 4.0, 201), b_max=1.0, n_b=101)
        self.assertEqual(ctx.exception.suggested_b_max, 2.0)
        capped = legendre(self.L, np.linspace(-4.0, 4.0, 201), b_max=1.0, n_b=101, capped=True)
        self.assertLessEqual(capped.b_sup, 1.0)
        self.assertAlmostEqual(float(capped(-4.0)), 3.0)

    def test_catalog_on_full_grid(self):
        # (coût, a_min, a_max, b_max, échantillon [b_lo, b_hi], sup de L'' sur l'échantillon)
        cases = [
            (make_lagrangian("power", power=3.0), -4.0, 4.0, 4.0, (1.2, 1.9), 3.8),
            (make_lagrangian("entropic_like"), -2.0, 4.0, 8.0, (0.1, 1.2), 10.0),
        ]
        for L, a_min, a_max, b_max, (b_lo, b_hi), curvature in cases:
            with self.subTest(name=L.name):
                h = legendre(L, np.linspace(a_min, a_max, 2001), b_max=b_max, n_b=4001)
                self.assertGreaterEqual(fenchel_young_gap(h), -1e-10)
                assert_allclose(h.values + h.a_grid * h.argmax + L(h.argmax), 0.0, atol=1e-10)
                b = h.b_grid[(h.b_grid >= b_lo) & (h.b_grid <= b_hi)]
                cell = float(h.b_grid[1])
                miss = L(b) - double_transform(h, b)
                self.assertGreaterEqual(float(miss.min()), -1e-10)
                self.assertLessEqual(float(miss.max()), 0.5 * curvature * (2.0 * cell) ** 2 + 1e-10)

    def test_regularity(self):
        smooth = legendre(self.L, np.linspace(-2.0, -0.5, 201), b_max=4.0, n_b=4001)
        self.assertTrue(check_a2(smooth))
        linear = make_lagrangian("linear", evaluator=lambda b: b, b_max=5.0)
        kinked = legendre(linear, np.linspace(-3.0, 3.0, 601), b_max=5.0, n_b=501, capped=True)
        self.assertFalse(check_a2(kinked))


if __name__ == "__main__":
    unittest.main()
