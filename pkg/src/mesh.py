from collections import namedtuple
from dataclasses import dataclass

import meshio
import networkx as nx
import numpy as np

from src.errors import ConfigurationError, StructuralError

# Local edge k of a triangle is the one opposite vertex k.
LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])

FacetAdjacency = namedtuple('FacetAdjacency', ['edges', 'vertex_pairs', 'left', 'right', 'normals'])
BoundaryFacets = namedtuple('BoundaryFacets', ['edges', 'vertex_pairs', 'element'])


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle [xmin, xmax] x [ymin, ymax]."""
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ConfigurationError(f"Empty box {self}")

    @classmethod
    def square(cls, a, b):
        return cls(a, b, a, b)

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def corners(self):
        return np.array([[self.xmin, self.ymin], [self.xmax, self.ymin],
                         [self.xmax, self.ymax], [self.xmin, self.ymax]])

    def contains(self, points, tol=0.0):
        points = np.asarray(points)
        x, y = points[..., 0], points[..., 1]
        return ((x >= self.xmin - tol) & (x <= self.xmax + tol)
                & (y >= self.ymin - tol) & (y <= self.ymax + tol))

    def on_boundary(self, points, tol=1e-12):
        points = np.asarray(points)
        x, y = points[..., 0], points[..., 1]
        near = (np.isclose(x, self.xmin, atol=tol) | np.isclose(x, self.xmax, atol=tol)
                | np.isclose(y, self.ymin, atol=tol) | np.isclose(y, self.ymax, atol=tol))
        return near & self.contains(points, tol)


class Mesh:
    """
    Immutable 2D triangulation with counter-clockwise elements and edge adjacency.
    """
    def __init__(self, vertices, elements):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.elements = np.ascontiguousarray(elements, dtype=np.int64)

        v = self.vertices[self.elements]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        self.areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        if np.any(self.areas <= 0):
            bad = int(np.argmin(self.areas))
            raise StructuralError(f"Element {bad} has non-positive area {self.areas[bad]}")

        self._build_edges()
        lengths = np.linalg.norm(self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]], axis=1)
        self.edge_lengths = lengths
        self.h = float(lengths.max())

        for arr in (self.vertices, self.elements, self.areas, self.edges,
                    self.element_edges, self.edge_elements, self.edge_lengths):
            arr.setflags(write=False)
        self._dual_graph = None

    def __repr__(self):
        return f"Mesh({self.num_vertices} vertices, {self.num_elements} triangles, h={self.h:.4g})"

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def _build_edges(self):
        M = self.num_elements
        local = self.elements[:, LOCAL_EDGES]                  # (M, 3, 2)
        flat = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if np.any(counts > 2):
            bad = int(np.argmax(counts))
            raise StructuralError(
                f"Edge {tuple(edges[bad])} is shared by {counts[bad]} elements (non-manifold)")

        self.edges = edges
        self.element_edges = inverse.reshape(M, 3)

        # 1. Fill the two element slots of every edge in element order
        owners = np.repeat(np.arange(M), 3)
        order = np.argsort(inverse, kind='stable')
        sorted_edges = inverse[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_edges[1:] != sorted_edges[:-1]
        edge_elements = np.full((len(edges), 2), -1, dtype=np.int64)
        edge_elements[sorted_edges[first], 0] = owners[order[first]]
        edge_elements[sorted_edges[~first], 1] = owners[order[~first]]
        self.edge_elements = edge_elements

    @property
    def boundary_edge_mask(self):
        return self.edge_elements[:, 1] < 0

    def boundary_vertex_mask(self):
        mask = np.zeros(self.num_vertices, dtype=bool)
        mask[self.edges[self.boundary_edge_mask].ravel()] = True
        return mask

    def centroids(self):
        return self.vertices[self.elements].mean(axis=1)

    def affine_maps(self):
        """
        Reference-to-physical affine maps x = v0 + B xi.

        Returns:
            v0 (M, 2), B (M, 2, 2), B^{-1} (M, 2, 2)
        """
        v = self.vertices[self.elements]
        v0 = v[:, 0]
        B = np.stack([v[:, 1] - v0, v[:, 2] - v0], axis=-1)
        return v0, B, np.linalg.inv(B)

    def to_reference(self, elements, points):
        """Reference coordinates of physical `points` (..., 2) inside `elements` (...)."""
        v0, _, Binv = self.affine_maps()
        d = points - v0[elements]
        return np.einsum('...ab,...b->...a', Binv[elements], d)

    def interior_facets(self):
        """
        Interior edges with both neighbors and the unit normal pointing out of `left`.
        """
        interior = np.flatnonzero(~self.boundary_edge_mask)
        left = self.edge_elements[interior, 0]
        right = self.edge_elements[interior, 1]
        if np.any(left == right):
            raise StructuralError("Interior facet with identical neighbors")
        pairs = self.edges[interior]
        a = self.vertices[pairs[:, 0]]
        b = self.vertices[pairs[:, 1]]
        t = b - a
        n = np.column_stack([t[:, 1], -t[:, 0]]) / np.linalg.norm(t, axis=1)[:, None]
        outward = np.einsum('ij,ij->i', n, 0.5 * (a + b) - self.centroids()[left])
        n[outward < 0] *= -1.0
        return FacetAdjacency(interior, pairs, left, right, n)

    def boundary_facets(self):
        bnd = np.flatnonzero(self.boundary_edge_mask)
        return BoundaryFacets(bnd, self.edges[bnd], self.edge_elements[bnd, 0])

    def dual_graph(self):
        """
        Element adjacency graph: one node per element, one edge per interior facet
        carrying the facet index into `interior_facets()`.
        """
        if self._dual_graph is None:
            facets = self.interior_facets()
            G = nx.Graph()
            G.add_nodes_from(range(self.num_elements))
            G.add_edges_from((int(l), int(r), {'facet': k})
                             for k, (l, r) in enumerate(zip(facets.left, facets.right)))
            self._dual_graph = G
        return self._dual_graph

    def facets_within(self, element_mask):
        """
        Indices into `interior_facets()` of facets whose two neighbors both satisfy `element_mask`.
        """
        G = self.dual_graph()
        members = np.flatnonzero(element_mask).tolist()
        sub = G.subgraph(members)
        return np.array(sorted(d['facet'] for _, _, d in sub.edges(data=True)), dtype=np.int64)

    def is_aligned_with(self, box, tol=1e-10):
        """
        True if every side of `box` is a union of mesh edges.
        """
        pts = self.vertices
        corners = box.corners()
        for k in range(4):
            a, b = corners[k], corners[(k + 1) % 4]
            on_side = _points_on_segment(pts, a, b, tol)
            if on_side.sum() < 2:
                return False
            # mesh edges lying on this side must cover its full length
            e = self.edges
            both = on_side[e[:, 0]] & on_side[e[:, 1]]
            covered = self.edge_lengths[both].sum()
            if abs(covered - np.linalg.norm(b - a)) > 1e-9 * max(1.0, np.linalg.norm(b - a)):
                return False
        return True

    def export_vtk(self, path, cell_data=None, point_data=None):
        """Write the mesh as legacy ASCII VTK."""
        points = np.column_stack([self.vertices, np.zeros(self.num_vertices)])
        out = meshio.Mesh(points, [('triangle', np.asarray(self.elements))],
                          point_data=point_data or {},
                          cell_data={k: [np.asarray(v)] for k, v in (cell_data or {}).items()})
        meshio.write(path, out, file_format='vtk', binary=False)


def _points_on_segment(points, a, b, tol):
    d = b - a
    L = np.linalg.norm(d)
    rel = points - a
    t = rel @ d / L**2
    dist = np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0]) / L
    return (dist <= tol * max(1.0, L)) & (t >= -tol) & (t <= 1 + tol)


def build_structured_mesh(domain, n, align_boxes=()):
    """
    Structured triangulation of `domain` with n cells per axis, each cell split by
    its lower-left to upper-right diagonal.

    Args:
        domain: Box.
        n: subdivisions per axis (>= 1).
        align_boxes: boxes whose sides must coincide with grid lines.

    Returns:
        Mesh with 2 n^2 triangles and (n+1)^2 vertices.
    """
    if n < 1:
        raise ConfigurationError(f"Need at least one subdivision, got n={n}")
    hx = (domain.xmax - domain.xmin) / n
    hy = (domain.ymax - domain.ymin) / n

    for box in align_boxes:
        for name, c, origin, step, lo, hi in (
                ('xmin', box.xmin, domain.xmin, hx, domain.xmin, domain.xmax),
                ('xmax', box.xmax, domain.xmin, hx, domain.xmin, domain.xmax),
                ('ymin', box.ymin, domain.ymin, hy, domain.ymin, domain.ymax),
                ('ymax', box.ymax, domain.ymin, hy, domain.ymin, domain.ymax)):
            k = (c - origin) / step
            if abs(k - round(k)) > 1e-9 or c < lo - 1e-12 or c > hi + 1e-12:
                raise ConfigurationError(
                    f"Box {name}={c} is not on a grid line of spacing {step:g} from {origin} (n={n})")

    xs = np.linspace(domain.xmin, domain.xmax, n + 1)
    ys = np.linspace(domain.ymin, domain.ymax, n + 1)
    X, Y = np.meshgrid(xs, ys, indexing='xy')
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing='xy')
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.empty((2 * n * n, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper
    return Mesh(vertices, elements)


def uniform_refine(mesh):
    """
    Split every triangle into four congruent children through its edge midpoints.
    """
    N = mesh.num_vertices
    midpoints = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])

    v = mesh.elements
    m = N + mesh.element_edges          # m[:, k] sits opposite vertex k
    children = np.concatenate([
        np.column_stack([v[:, 0], m[:, 2], m[:, 1]]),
        np.column_stack([m[:, 2], v[:, 1], m[:, 0]]),
        np.column_stack([m[:, 1], m[:, 0], v[:, 2]]),
        np.column_stack([m[:, 0], m[:, 1], m[:, 2]]),
    ])
    # keep the four children of a parent adjacent: parent e -> rows 4e..4e+3
    M = mesh.num_elements
    order = np.arange(4 * M).reshape(4, M).T.ravel()
    return Mesh(vertices, children[order])
