import unittest

import numpy as np

from src.cutgeom import LevelSet, build_cut_geometry, full_element_quadrature
from src.errors import ConfigurationError, DataError
from src.fespace import (NEG, POS, LagrangeDofMap, build_spaces, eval_basis, lagrange_element,
                         nodal_interpolate)
from src.isomap import Deformation
from src.mesh import Box, build_structured_mesh, uniform_refine


class TestLagrangeBasis(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        pts = rng.random((20, 2))
        self.points = pts[pts.sum(axis=1) <= 1.0]

    def test_partition_of_unity(self):
        for p in (1, 2, 3):
            values = eval_basis(p, self.points, 0)
            np.testing.assert_allclose(values.sum(axis=-1), 1.0, atol=1e-12)
            grads = eval_basis(p, self.points, 1)
            np.testing.assert_allclose(grads.sum(axis=-2), 0.0, atol=1e-10)
            hess = eval_basis(p, self.points, 2)
            np.testing.assert_allclose(hess.sum(axis=-3), 0.0, atol=1e-9)

    def test_nodal_delta(self):
        for p in (1, 2, 3):
            element = lagrange_element(p)
            np.testing.assert_allclose(element.values(element.nodes), np.eye(element.num_local), atol=1e-12)

    def test_local_counts(self):
        self.assertEqual([lagrange_element(p).num_local for p in (1, 2, 3)], [3, 6, 10])

    def test_quadratic_hessian(self):
        # x^2 reproduced exactly by p = 2, Hessian [[2, 0], [0, 0]]
        element = lagrange_element(2)
        coeffs = element.nodes[:, 0]**2
        hess = np.einsum('qnij,n->qij', element.hessians(self.points), coeffs)
        np.testing.assert_allclose(hess, np.broadcast_to([[2.0, 0.0], [0.0, 0.0]], hess.shape), atol=1e-10)

    def test_unsupported_derivative(self):
        with self.assertRaises(ConfigurationError):
            eval_basis(2, self.points, 3)


class TestDofMaps(unittest.TestCase):
    def test_counts(self):
        mesh = build_structured_mesh(Box.square(0.0, 1.0), 3)
        for p, expected in ((1, 16), (2, 49), (3, 100)):
            self.assertEqual(LagrangeDofMap(mesh, p).num_dofs, expected)

    def test_coordinates_shared_between_elements(self):
        mesh = build_structured_mesh(Box.square(0.0, 1.0), 3)
        dofs = LagrangeDofMap(mesh, 3)
        v0, B, _ = mesh.affine_maps()
        local = v0[:, None] + np.einsum('mab,nb->mna', B, lagrange_element(3).nodes)
        np.testing.assert_allclose(dofs.coordinates[dofs.cell_dofs], local, atol=1e-14)

    def test_dirichlet_single_cell(self):
        mesh = build_structured_mesh(Box.square(0.0, 1.0), 1)
        geom = build_cut_geometry(LevelSet.affine(1.0, 0.0, -5.0), mesh)
        _, dual = build_spaces(mesh, geom, 1)
        self.assertEqual(dual.num_dofs, 0)

    def test_no_cut_single_side(self):
        mesh = build_structured_mesh(Box.square(0.0, 1.0), 4)
        geom = build_cut_geometry(LevelSet.affine(1.0, 0.0, -5.0), mesh)
        cut, _ = build_spaces(mesh, geom, 2)
        self.assertEqual(cut.num_dofs, LagrangeDofMap(mesh, 2).num_dofs)
        self.assertEqual(len(cut.side_dofs[POS]), 0)

    def test_cut_doubling(self):
        mesh = build_structured_mesh(Box.square(0.0, 1.0), 1)
        # only the vertex (1, 1) is positive and it is shared by both triangles
        geom = build_cut_geometry(LevelSet.affine(1.0, 1.0, -1.5), mesh)
        cut, _ = build_spaces(mesh, geom, 1)
        self.assertEqual(len(geom.cut_elements), 2)
        self.assertEqual(cut.num_dofs, 2 * 4)
        fine = build_structured_mesh(Box.square(0.0, 1.0), 4)
        geom = build_cut_geometry(LevelSet.affine(1.0, 0.0, -0.4), fine)
        cut, _ = build_spaces(fine, geom, 1)
        # columns x <= 0.5 on side NEG, x >= 0.25 on side POS
        self.assertEqual(cut.num_dofs, 3 * 5 + 4 * 5)

    def test_inactive_side_evaluates_to_zero(self):
        mesh = build_structured_mesh(Box.square(0.0, 1.0), 4)
        geom = build_cut_geometry(LevelSet.affine(1.0, 0.0, -0.4), mesh)
        cut, _ = build_spaces(mesh, geom, 2)
        coeffs = np.ones(cut.num_dofs)
        far = geom.uncut(NEG)
        xi = np.full((len(far), 1, 2), 1.0 / 3.0)
        np.testing.assert_allclose(cut.evaluate(coeffs, POS, far, xi), 0.0)
        np.testing.assert_allclose(cut.evaluate(coeffs, NEG, far, xi), 1.0)


class TestNodalInterpolation(unittest.TestCase):
    def setUp(self):
        self.mesh = build_structured_mesh(Box.square(-1.0, 1.0), 4)
        self.geom = build_cut_geometry(LevelSet.norm_ball(2), self.mesh)

    def test_constant(self):
        cut, _ = build_spaces(self.mesh, self.geom, 2)
        one = lambda p: np.ones(p.shape[:-1])
        coeffs = nodal_interpolate((one, one), cut, Deformation.identity(self.mesh))
        np.testing.assert_allclose(coeffs, 1.0)

    def test_affine_reproduction(self):
        cut, _ = build_spaces(self.mesh, self.geom, 1)
        f = lambda p: 2.0 * p[..., 0] - p[..., 1] + 0.5
        coeffs = nodal_interpolate((f, f), cut, Deformation.identity(self.mesh))
        elements = self.geom.active(POS)
        rng = np.random.default_rng(1)
        xi = rng.random((len(elements), 5, 2)) * 0.5
        v0, B, _ = self.mesh.affine_maps()
        x = v0[elements][:, None] + np.einsum('eab,eqb->eqa', B[elements], xi)
        np.testing.assert_allclose(cut.evaluate(coeffs, POS, elements, xi), f(x), atol=1e-12)

    def test_non_finite(self):
        cut, _ = build_spaces(self.mesh, self.geom, 1)
        bad = lambda p: np.full(p.shape[:-1], np.inf)
        with self.assertRaises(DataError):
            nodal_interpolate((bad, bad), cut, Deformation.identity(self.mesh))

    def test_interpolation_rate(self):
        f = lambda p: np.sin(p[..., 0]) * np.cos(2 * p[..., 1])
        mesh = build_structured_mesh(Box.square(-1.0, 1.0), 4)
        for p in (1, 2):
            errors = []
            m = mesh
            for _ in range(3):
                geom = build_cut_geometry(LevelSet.affine(1.0, 0.0, -5.0), m)
                cut, _ = build_spaces(m, geom, p)
                coeffs = nodal_interpolate((f, f), cut, Deformation.identity(m))
                rule = full_element_quadrature(m, np.arange(m.num_elements), 2 * p + 4)
                v0, B, _ = m.affine_maps()
                x = v0[rule.elements][:, None] + np.einsum('eab,eqb->eqa', B[rule.elements], rule.xi)
                uh = cut.evaluate(coeffs, NEG, rule.elements, rule.xi)
                errors.append(np.sqrt(np.sum(rule.weights * (uh - f(x))**2)))
                m = uniform_refine(m)
            rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
            self.assertGreater(rates[-1], p + 1 - 0.3)


if __name__ == '__main__':
    unittest.main()
