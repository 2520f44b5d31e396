import unittest

import numpy as np
import sympy

from src.errors import ConfigurationError, DomainError
from src.fespace import NEG, POS
from src.problems import (BENCHMARK_STAB, CATALOG, X, Y, ManufacturedSolution, NoiseParams,
                          StabParams, eval_exact_solution, eval_source_term, make_problem, with_stab)


def on_interface(ell, n=7):
    """Points on the unit ell-ball boundary with their outward normals."""
    t = np.linspace(0.1, 2 * np.pi - 0.1, n)
    d = np.column_stack([np.cos(t), np.sin(t)])
    r = (np.abs(d[:, 0])**ell + np.abs(d[:, 1])**ell)**(-1.0 / ell)
    points = d * r[:, None]
    grad = np.sign(points) * np.abs(points)**(ell - 1)
    return points, grad / np.linalg.norm(grad, axis=1)[:, None]


class TestCatalog(unittest.TestCase):
    def test_entries(self):
        self.assertEqual(sorted(CATALOG),
                         ['circle-l2', 'diffusion-l4', 'helmholtz-l4-box', 'helmholtz-l4-convex'])

    def test_diffusion_defaults(self):
        problem = make_problem('diffusion-l4')
        self.assertEqual(problem.mu, (2.0, 2.0))
        self.assertEqual(problem.rho, (0.0, 0.0))
        self.assertEqual((problem.p, problem.q, problem.n0), (1, 1, 12))
        self.assertEqual(problem.omega_side, NEG)
        self.assertEqual(problem.order, 4)

    def test_helmholtz_convex_defaults(self):
        problem = make_problem('helmholtz-l4-convex')
        self.assertEqual(problem.mu, (1.0, 2.0))
        self.assertEqual(problem.rho, (256.0, 4.0))
        self.assertEqual(problem.omega_side, POS)
        C1, C2 = problem.solution.constants
        self.assertAlmostEqual(C1, -0.36137, places=4)
        self.assertAlmostEqual(C2, np.sin(2.0) - C1 * np.cos(16.0), places=14)
        self.assertAlmostEqual(problem.omega.area, 2.0, places=14)
        self.assertEqual(problem.n0 % 12, 0)

    def test_helmholtz_box_omega(self):
        problem = make_problem('helmholtz-l4-box')
        self.assertEqual(problem.omega_side, NEG)
        self.assertEqual(problem.rho, (9.0, 1.0))

    def test_overrides(self):
        problem = make_problem('helmholtz-l4-box', {'wavenumbers': [3, 6], 'p': 3, 'q': 3,
                                                    'stabilization': {'gamma_if': 0.5}})
        self.assertEqual(problem.rho, (9.0, 36.0))
        self.assertEqual(problem.stab.gamma_if, 0.5)
        self.assertEqual(problem.order, 8)

    def test_invalid(self):
        cases = [
            ('unknown', {}),
            ('diffusion-l4', {'p': 1, 'q': 2}),
            ('diffusion-l4', {'p': 4}),
            ('diffusion-l4', {'mu': [1.0, 0.0]}),
            ('diffusion-l4', {'wavenumbers': [1, 2]}),
            ('helmholtz-l4-box', {'rho': [1, 2]}),
            ('diffusion-l4', {'colour': 'red'}),
            ('diffusion-l4', {'stabilization': {'gamma_foo': 1.0}}),
            ('diffusion-l4', {'stabilization': {'alpha1': 0.0}}),
            ('diffusion-l4', {'noise': {'delta_tilde': -1.0}}),
            ('helmholtz-l4-box', {'wavenumbers': [np.pi, 1.0]}),
        ]
        for catalog_id, overrides in cases:
            with self.assertRaises(ConfigurationError, msg=str(overrides)):
                make_problem(catalog_id, overrides)

    def test_with_stab(self):
        problem = with_stab(make_problem('diffusion-l4'), gamma_if=1e-5, include_nc=False)
        self.assertEqual(problem.stab.gamma_if, 1e-5)
        self.assertFalse(problem.stab.include_nc)
        self.assertEqual(problem.stab.gamma_cip, BENCHMARK_STAB['gamma_cip'])

    def test_benchmark_stab_under_overrides(self):
        problem = make_problem('diffusion-l4', {'stabilization': {'alpha2': 0.0}})
        self.assertEqual(problem.stab.alpha2, 0.0)
        self.assertEqual(problem.stab.gamma_gls, BENCHMARK_STAB['gamma_gls'])
        self.assertEqual(problem.stab.alpha1, BENCHMARK_STAB['alpha1'])
        self.assertEqual(StabParams().gamma_gls, 1.0)


class TestParameters(unittest.TestCase):
    def test_kappa(self):
        k1, k2 = StabParams().kappa((20.0, 2.0))
        self.assertAlmostEqual(k1, 1.0 / 11.0, places=15)
        self.assertAlmostEqual(k2, 10.0 / 11.0, places=15)
        self.assertEqual(StabParams(kappa_mode='average').kappa((20.0, 2.0)), (0.5, 0.5))

    def test_noise_level(self):
        self.assertAlmostEqual(NoiseParams(delta_tilde=2.0, theta=1).delta(0.5, 2), 1.0, places=15)
        self.assertEqual(NoiseParams().delta(0.1, 1), 0.0)


class TestManufacturedSolutions(unittest.TestCase):
    def test_diffusion_interface_value(self):
        for mu in ((2.0, 2.0), (20.0, 2.0), (1.0, 5.0)):
            sol = ManufacturedSolution.diffusion(mu)
            expected = np.pi * mu[0] / (np.sqrt(2) * mu[1])
            point = np.array([[1.0, 0.0]])
            self.assertAlmostEqual(sol.value(NEG, point)[0], expected, places=13)
            self.assertAlmostEqual(sol.value(POS, point)[0], expected, places=13)

    def test_transmission_conditions(self):
        solutions = [ManufacturedSolution.diffusion((20.0, 2.0)),
                     ManufacturedSolution.diffusion((2.0, 2.0), ell=2),
                     ManufacturedSolution.helmholtz((1.0, 2.0), (16.0, 2.0)),
                     ManufacturedSolution.helmholtz((2.0, 2.0), (3.0, 6.0))]
        for sol in solutions:
            ell = 2 if sol.name.endswith('l2') else 4
            points, normals = on_interface(ell)
            np.testing.assert_allclose(sol.value(NEG, points), sol.value(POS, points), atol=1e-11)
            flux = [sol.mu[s] * np.einsum('ij,ij->i', sol.gradient(s, points), normals) for s in (NEG, POS)]
            np.testing.assert_allclose(flux[0], flux[1], atol=1e-9)

    def test_source_matches_finite_differences(self):
        sol = ManufacturedSolution.helmholtz((1.0, 2.0), (16.0, 2.0))
        x = np.array([[0.3, 0.2], [-0.5, 0.4]])
        eps = 1e-4
        for side in (NEG, POS):
            u = lambda p: sol.value(side, p)
            lap = sum((u(x + e) - 2 * u(x) + u(x - e)) / eps**2
                      for e in (np.array([eps, 0.0]), np.array([0.0, eps])))
            expected = -sol.mu[side] * lap - sol.rho[side] * u(x)
            np.testing.assert_allclose(eval_source_term(sol, side, x), expected, rtol=1e-5, atol=1e-4)

    def test_affine_branch_has_no_source(self):
        sol = ManufacturedSolution((X + 2 * Y, sympy.Integer(3) * X), (1.0, 4.0), (0.0, 0.0))
        points = np.random.default_rng(0).random((5, 2))
        np.testing.assert_allclose(sol.source(NEG, points), 0.0)
        np.testing.assert_allclose(sol.source(POS, points), 0.0)
        np.testing.assert_allclose(eval_exact_solution(sol, NEG, points, gradient=True),
                                   np.tile([1.0, 2.0], (5, 1)))

    def test_shapes_broadcast(self):
        sol = ManufacturedSolution.diffusion((2.0, 2.0))
        points = np.zeros((3, 4, 2)) + 0.1
        self.assertEqual(sol.value(NEG, points).shape, (3, 4))
        self.assertEqual(sol.gradient(NEG, points).shape, (3, 4, 2))
        # constant branch still yields a full array
        const = ManufacturedSolution((sympy.Integer(1), sympy.Integer(2)), (1.0, 1.0), (0.0, 0.0))
        self.assertEqual(const.value(POS, points).shape, (3, 4))

    def test_singular_outer_branch(self):
        sol = ManufacturedSolution.diffusion((2.0, 2.0))
        origin = np.array([[0.0, 0.0]])
        with self.assertRaises(DomainError):
            sol.gradient(POS, origin)
        with self.assertRaises(DomainError):
            sol.source(POS, origin)
        # the inner branch is smooth there
        self.assertEqual(sol.gradient(NEG, origin).shape, (1, 2))


if __name__ == '__main__':
    unittest.main()
