import unittest

import numpy as np

from src.cutgeom import (CUT, LevelSet, build_cut_geometry, classify_elements, decompose_cut_element,
                         facet_quadrature, full_element_quadrature, interface_quadrature,
                         interpolate_p1, reference_quadrature)
from src.errors import DataError, DegenerateLevelsetError
from src.fespace import NEG, POS
from src.mesh import Box, Mesh, build_structured_mesh
from src.quadrature import line_rule, triangle_rule


def tri_area(t):
    e1, e2 = t[1] - t[0], t[2] - t[0]
    return 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])


class TestQuadratureRules(unittest.TestCase):
    def test_triangle_rule_exactness(self):
        for order in range(0, 9):
            pts, w = triangle_rule(order)
            self.assertAlmostEqual(w.sum(), 0.5, places=14)
            # int x^a y^b over the reference triangle = a! b! / (a + b + 2)!
            from math import factorial
            for a in range(order + 1):
                b = order - a
                exact = factorial(a) * factorial(b) / factorial(a + b + 2)
                self.assertAlmostEqual(np.sum(w * pts[:, 0]**a * pts[:, 1]**b), exact, places=13)

    def test_line_rule_exactness(self):
        for order in range(0, 9):
            t, w = line_rule(order)
            self.assertAlmostEqual(np.sum(w * t**order), 1.0 / (order + 1), places=14)


class TestDecomposition(unittest.TestCase):
    def setUp(self):
        self.tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def test_single_negative_vertex(self):
        # phi = x + y - 0.5
        out = decompose_cut_element(self.tri, np.array([-0.5, 0.5, 0.5]))
        self.assertEqual(len(out['neg']), 1)
        self.assertEqual(len(out['pos']), 2)
        self.assertAlmostEqual(sum(tri_area(t) for t in out['neg']), 0.125, places=14)
        self.assertAlmostEqual(sum(tri_area(t) for t in out['pos']), 0.375, places=14)
        seg = out['segment']
        self.assertAlmostEqual(np.linalg.norm(seg[1] - seg[0]), np.sqrt(2) / 2, places=14)
        np.testing.assert_allclose(out['normal'], [1 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-14)

    def test_two_negative_vertices(self):
        out = decompose_cut_element(self.tri, np.array([-1.0, -1.0, 1.0]))
        self.assertEqual(len(out['neg']), 2)
        self.assertEqual(len(out['pos']), 1)
        total = sum(tri_area(t) for t in out['neg'] + out['pos'])
        self.assertAlmostEqual(total, 0.5, places=14)

    def test_vertex_on_interface(self):
        # phi vanishes at v1; the cut runs from v1 through the opposite edge
        out = decompose_cut_element(self.tri, np.array([-1.0, 0.0, 1.0]))
        self.assertEqual(len(out['neg']), 1)
        self.assertEqual(len(out['pos']), 1)
        self.assertAlmostEqual(sum(tri_area(t) for t in out['neg']), 0.25, places=14)
        np.testing.assert_allclose(out['segment'][0], [1.0, 0.0], atol=1e-15)


class TestCutGeometry(unittest.TestCase):
    def setUp(self):
        self.mesh = build_structured_mesh(Box.square(0.0, 1.0), 4)
        self.levelset = LevelSet.affine(1.0, 0.0, -0.4)       # x = 0.4

    def test_classification(self):
        geom = build_cut_geometry(self.levelset, self.mesh)
        cut = geom.labels == CUT
        self.assertEqual(cut.sum(), 8)
        self.assertEqual(len(geom.active_neg) + len(geom.active_pos), self.mesh.num_elements + 8)

    def test_areas_and_interface_length(self):
        geom = build_cut_geometry(self.levelset, self.mesh)
        for side, area in ((NEG, 0.4), (POS, 0.6)):
            volume, interface = reference_quadrature(geom, side, 2)
            self.assertAlmostEqual(sum(b.total_weight() for b in volume), area, places=13)
        self.assertAlmostEqual(interface.total_weight(), 1.0, places=13)
        np.testing.assert_allclose(interface.normals.reshape(-1, 2),
                                   np.tile([1.0, 0.0], (interface.normals.size // 2, 1)), atol=1e-14)

    def test_reference_points_inside_elements(self):
        geom = build_cut_geometry(self.levelset, self.mesh)
        volume, interface = reference_quadrature(geom, NEG, 4)
        for batch in volume + [interface]:
            xi = batch.xi
            self.assertTrue(np.all(xi >= -1e-12))
            self.assertTrue(np.all(xi.sum(axis=-1) <= 1 + 1e-12))

    def test_no_cut(self):
        geom = build_cut_geometry(LevelSet.affine(1.0, 0.0, -5.0), self.mesh)
        self.assertEqual(len(geom.cut_elements), 0)
        self.assertEqual(len(geom.active_pos), 0)
        self.assertTrue(interface_quadrature(geom, 2).is_empty)

    def test_degenerate(self):
        mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
        with self.assertRaises(DegenerateLevelsetError):
            classify_elements(np.zeros(3), mesh)

    def test_non_finite_levelset(self):
        bad = LevelSet(lambda p: np.full(p.shape[:-1], np.nan), lambda p: p)
        with self.assertRaises(DataError):
            interpolate_p1(bad, self.mesh)

    def test_circle_area_converges(self):
        errors = []
        for n in (8, 16, 32):
            mesh = build_structured_mesh(Box.square(-1.5, 1.5), n)
            geom = build_cut_geometry(LevelSet.norm_ball(2), mesh)
            volume, _ = reference_quadrature(geom, NEG, 2)
            errors.append(abs(sum(b.total_weight() for b in volume) - np.pi))
        rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        self.assertGreater(rates.mean(), 1.5)


class TestElementAndFacetRules(unittest.TestCase):
    def test_full_element_rule(self):
        mesh = build_structured_mesh(Box.square(0.0, 2.0), 3)
        rule = full_element_quadrature(mesh, np.arange(mesh.num_elements), 3)
        self.assertAlmostEqual(rule.total_weight(), 4.0, places=13)

    def test_facet_rule_views_agree(self):
        mesh = build_structured_mesh(Box.square(0.0, 1.0), 3)
        facets = np.arange(len(mesh.interior_facets().edges))
        fq = facet_quadrature(mesh, facets, 4)
        v0, B, _ = mesh.affine_maps()
        left = v0[fq.left][:, None] + np.einsum('eab,eqb->eqa', B[fq.left], fq.xi_left)
        right = v0[fq.right][:, None] + np.einsum('eab,eqb->eqa', B[fq.right], fq.xi_right)
        np.testing.assert_allclose(left, right, atol=1e-14)
        self.assertAlmostEqual(fq.weights.sum(), mesh.edge_lengths[mesh.interior_facets().edges].sum(), places=12)


if __name__ == '__main__':
    unittest.main()
