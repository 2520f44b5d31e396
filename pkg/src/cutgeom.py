import meshio
import numpy as np

from src.errors import DataError, DegenerateLevelsetError, NumericalDegeneracyError
from src.fespace import NEG, POS
from src.mesh import LOCAL_EDGES
from src.quadrature import (ElementQuadrature, FacetQuadrature, map_to_segments,
                            map_to_triangles)

CUT = 2


class LevelSet:
    """
    Scalar levelset with its gradient; negative values are side NEG (Omega_1).
    """
    def __init__(self, func, grad, name='custom', ell=None):
        self._func = func
        self._grad = grad
        self.name = name
        self.ell = ell

    def __repr__(self):
        return f"LevelSet({self.name})"

    def __call__(self, points):
        return self._func(np.asarray(points, dtype=float))

    def gradient(self, points):
        return self._grad(np.asarray(points, dtype=float))

    @classmethod
    def norm_ball(cls, ell):
        """phi = ||x||_ell - 1."""
        def func(p):
            return (np.abs(p[..., 0])**ell + np.abs(p[..., 1])**ell)**(1.0 / ell) - 1.0

        def grad(p):
            r = (np.abs(p[..., 0])**ell + np.abs(p[..., 1])**ell)**(1.0 / ell)
            g = np.sign(p) * np.abs(p)**(ell - 1)
            scale = np.divide(1.0, r**(ell - 1), out=np.zeros_like(r), where=r > 0)
            return g * scale[..., None]

        return cls(func, grad, name=f'l{ell}-ball', ell=ell)

    @classmethod
    def affine(cls, a, b, c):
        """phi = a x + b y + c."""
        def func(p):
            return a * p[..., 0] + b * p[..., 1] + c

        def grad(p):
            return np.broadcast_to(np.array([a, b], dtype=float), p.shape).copy()

        return cls(func, grad, name='affine')


def interpolate_p1(levelset, mesh):
    """Vertex values of the levelset (its P1 nodal interpolant)."""
    values = np.asarray(levelset(mesh.vertices), dtype=float)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values))[0])
        raise DataError(f"Levelset is not finite at vertex {bad} {mesh.vertices[bad]}")
    return values


def classify_elements(vertex_values, mesh):
    """
    NEG, POS or CUT per element. Zero vertex values carry no side; an element is CUT
    only when both strict signs are present.
    """
    v = vertex_values[mesh.elements]
    has_neg = np.any(v < 0, axis=1)
    has_pos = np.any(v > 0, axis=1)
    if np.any(~has_neg & ~has_pos):
        bad = int(np.flatnonzero(~has_neg & ~has_pos)[0])
        raise DegenerateLevelsetError(f"Levelset vanishes on all vertices of element {bad}")
    labels = np.where(has_neg, NEG, POS)
    labels[has_neg & has_pos] = CUT
    return labels


def _edge_crossing(a, b, fa, fb):
    """
    Zero of the linear interpolant on segments a->b. Returns nan where the edge
    has no crossing; a vanishing endpoint next to a nonzero one is itself the crossing.
    """
    out = np.full(a.shape, np.nan)
    strict = fa * fb < 0
    with np.errstate(divide='ignore', invalid='ignore'):
        t = fa / (fa - fb)
    if np.any(strict & ~((t > 0) & (t < 1))):
        raise NumericalDegeneracyError("Zero crossing parameter outside (0, 1)")
    out[strict] = a[strict] + t[strict, None] * (b[strict] - a[strict])
    za = (fa == 0) & (fb != 0)
    zb = (fb == 0) & (fa != 0)
    out[za] = a[za]
    out[zb] = b[zb]
    return out


def _decompose(corners, values, crossings):
    """
    Split cut elements along the zero line.

    Args:
        corners: (C, 3, 2) vertices; values: (C, 3); crossings: (C, 3, 2) crossing on each local edge.

    Returns:
        triangles (C, 2, 2, 3, 2) indexed [element, side, piece]; segments (C, 2, 2).
    """
    C = len(corners)
    idx = np.arange(C)
    n_neg = np.sum(values < 0, axis=1)
    lonely_side = np.where(n_neg == 1, NEG, POS)
    k = np.where(lonely_side == NEG, np.argmin(values, axis=1), np.argmax(values, axis=1))
    k1 = (k + 1) % 3
    k2 = (k + 2) % 3

    vk, vk1, vk2 = corners[idx, k], corners[idx, k1], corners[idx, k2]
    c1 = crossings[idx, k2]     # on edge (k, k1)
    c2 = crossings[idx, k1]     # on edge (k, k2)
    if np.any(np.isnan(c1)) or np.any(np.isnan(c2)):
        raise NumericalDegeneracyError("Cut element without two edge crossings")

    lonely = np.stack([vk, c1, c2], axis=1)
    padding = np.stack([vk, vk, vk], axis=1)
    quad_a = np.stack([c1, vk1, vk2], axis=1)
    quad_b = np.stack([c1, vk2, c2], axis=1)

    triangles = np.empty((C, 2, 2, 3, 2))
    lone = lonely_side == NEG
    triangles[:, NEG, 0] = np.where(lone[:, None, None], lonely, quad_a)
    triangles[:, NEG, 1] = np.where(lone[:, None, None], padding, quad_b)
    triangles[:, POS, 0] = np.where(lone[:, None, None], quad_a, lonely)
    triangles[:, POS, 1] = np.where(lone[:, None, None], quad_b, padding)
    segments = np.stack([c1, c2], axis=1)
    return triangles, segments


def decompose_cut_element(vertices, values):
    """
    Sub-triangulation and interface segment of a single cut triangle.

    Args:
        vertices: (3, 2) counter-clockwise triangle.
        values: (3,) levelset vertex values with both strict signs present.

    Returns:
        dict with 'neg' and 'pos' lists of sub-triangles (3, 2), 'segment' (2, 2)
        and the unit 'normal' pointing from NEG to POS.
    """
    vertices = np.asarray(vertices, dtype=float)
    values = np.asarray(values, dtype=float)
    crossings = np.empty((3, 2))
    for k, (a, b) in enumerate(LOCAL_EDGES):
        crossings[k] = _edge_crossing(vertices[a][None], vertices[b][None],
                                      values[a][None], values[b][None])[0]
    triangles, segments = _decompose(vertices[None], values[None], crossings[None])
    normal = _p1_gradients(vertices[None], values[None])[0]

    def nondegenerate(tris):
        return [t for t in tris if _area(t) > 0]

    return {'neg': nondegenerate(triangles[0, NEG]),
            'pos': nondegenerate(triangles[0, POS]),
            'segment': segments[0],
            'normal': normal / np.linalg.norm(normal)}


def _area(tri):
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    return 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])


def _p1_gradients(corners, values):
    v0 = corners[:, 0]
    B = np.stack([corners[:, 1] - v0, corners[:, 2] - v0], axis=-1)
    dphi = np.stack([values[:, 1] - values[:, 0], values[:, 2] - values[:, 0]], axis=-1)
    return np.linalg.solve(np.swapaxes(B, 1, 2), dphi[..., None])[..., 0]


class CutGeometry:
    """
    Piecewise linear reference geometry: classification, active meshes, sub-triangles
    of cut elements and the interface segments with unit normals pointing NEG -> POS.
    """
    def __init__(self, mesh, vertex_values):
        self.mesh = mesh
        self.vertex_values = np.asarray(vertex_values, dtype=float)
        self.labels = classify_elements(self.vertex_values, mesh)
        self.cut_elements = np.flatnonzero(self.labels == CUT)
        self.active_neg = np.flatnonzero(self.labels != POS)
        self.active_pos = np.flatnonzero(self.labels != NEG)

        # crossings are computed once per mesh edge so neighbors share them
        e = mesh.edges
        self.edge_crossings = _edge_crossing(mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]],
                                             self.vertex_values[e[:, 0]], self.vertex_values[e[:, 1]])

        cut = self.cut_elements
        corners = mesh.vertices[mesh.elements[cut]]
        values = self.vertex_values[mesh.elements[cut]]
        crossings = self.edge_crossings[mesh.element_edges[cut]]
        self.sub_triangles, self.segments = _decompose(corners, values, crossings)
        grads = _p1_gradients(corners, values)
        self.normals = grads / np.linalg.norm(grads, axis=1)[:, None]

    def __repr__(self):
        return (f"CutGeometry({len(self.active_neg)} neg-active, {len(self.active_pos)} pos-active, "
                f"{len(self.cut_elements)} cut)")

    def active(self, side):
        return self.active_neg if side == NEG else self.active_pos

    def active_mask(self, side):
        mask = np.zeros(self.mesh.num_elements, dtype=bool)
        mask[self.active(side)] = True
        return mask

    def uncut(self, side):
        return np.flatnonzero(self.labels == side)

    def export_vtk(self, path):
        """Write the sub-triangulation with a `side` cell tag (0 NEG, 1 POS)."""
        tris = [self.mesh.vertices[self.mesh.elements[self.uncut(s)]] for s in (NEG, POS)]
        sides = [np.full(len(t), s) for s, t in zip((NEG, POS), tris)]
        for s in (NEG, POS):
            pieces = self.sub_triangles[:, s].reshape(-1, 3, 2)
            keep = np.array([_area(t) > 0 for t in pieces], dtype=bool) if len(pieces) else np.zeros(0, bool)
            tris.append(pieces[keep])
            sides.append(np.full(int(keep.sum()), s))
        tris = np.concatenate(tris)
        points = np.column_stack([tris.reshape(-1, 2), np.zeros(3 * len(tris))])
        cells = np.arange(3 * len(tris)).reshape(-1, 3)
        out = meshio.Mesh(points, [('triangle', cells)], cell_data={'side': [np.concatenate(sides)]})
        meshio.write(path, out, file_format='vtk', binary=False)


def build_cut_geometry(levelset, mesh):
    return CutGeometry(mesh, interpolate_p1(levelset, mesh))


def full_element_quadrature(mesh, elements, order):
    corners = mesh.vertices[mesh.elements[elements]]
    points, weights = map_to_triangles(corners, order)
    xi = mesh.to_reference(np.asarray(elements)[:, None], points)
    return ElementQuadrature(elements, xi, weights)


def reference_quadrature(geometry, side, order):
    """
    Volume and interface rules on the piecewise linear reference configuration.

    Returns:
        (volume batches, interface batch): uncut elements of `side` with the full
        triangle rule, cut elements with the rule on their `side` sub-triangles, and
        the line rule on the interface segments of the cut elements.
    """
    mesh = geometry.mesh
    volume = [full_element_quadrature(mesh, geometry.uncut(side), order)]
    cut = geometry.cut_elements
    tris = geometry.sub_triangles[:, side]                       # (C, 2, 3, 2)
    points, weights = map_to_triangles(tris, order)               # (C, 2, n, 2)
    n = 2 * weights.shape[-1]
    points = points.reshape(len(cut), n, 2)
    weights = weights.reshape(len(cut), n)
    xi = mesh.to_reference(cut[:, None], points)
    volume.append(ElementQuadrature(cut, xi, weights))
    return volume, interface_quadrature(geometry, order)


def interface_quadrature(geometry, order):
    mesh = geometry.mesh
    cut = geometry.cut_elements
    points, weights = map_to_segments(geometry.segments[:, 0], geometry.segments[:, 1], order)
    xi = mesh.to_reference(cut[:, None], points)
    normals = np.broadcast_to(geometry.normals[:, None, :], points.shape).copy()
    return ElementQuadrature(cut, xi, weights, normals)


def facet_quadrature(mesh, facet_indices, order):
    """Line rule on the interior facets selected by `facet_indices`."""
    facets = mesh.interior_facets()
    pairs = facets.vertex_pairs[facet_indices]
    a = mesh.vertices[pairs[:, 0]]
    b = mesh.vertices[pairs[:, 1]]
    points, weights = map_to_segments(a, b, order)
    left = facets.left[facet_indices]
    right = facets.right[facet_indices]
    normals = np.broadcast_to(facets.normals[facet_indices][:, None, :], points.shape).copy()
    return FacetQuadrature(left, right,
                           mesh.to_reference(left[:, None], points),
                           mesh.to_reference(right[:, None], points),
                           weights, normals)
