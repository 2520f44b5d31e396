from functools import lru_cache

import numpy as np

from src.errors import ConfigurationError, DataError

NEG, POS = 0, 1
SUPPORTED_DEGREES = (1, 2, 3)


class LagrangeElement:
    """
    Lagrange shape functions of a given degree on the reference triangle
    (0,0), (1,0), (0,1), built from the inverse monomial Vandermonde matrix.

    Local node order: the three vertices, then the nodes inside edge 0 (v1 -> v2),
    edge 1 (v2 -> v0), edge 2 (v0 -> v1), then interior nodes.
    """
    def __init__(self, degree):
        if degree < 1:
            raise ConfigurationError(f"Lagrange degree must be >= 1, got {degree}")
        self.degree = degree
        self.exponents = np.array([(a, d - a) for d in range(degree + 1) for a in range(d, -1, -1)])
        self.nodes = reference_nodes(degree)
        self.num_local = self.nodes.shape[0]
        V = self._monomials(self.nodes)
        self.coefficients = np.linalg.inv(V)

    def _monomials(self, xi):
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        x = xi[..., 0, None]
        y = xi[..., 1, None]
        return x**a * y**b

    def values(self, xi):
        """Shape values (..., n) at reference points xi (..., 2)."""
        return self._monomials(xi) @ self.coefficients

    def gradients(self, xi):
        """Reference gradients (..., n, 2)."""
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        x = xi[..., 0, None]
        y = xi[..., 1, None]
        dx = a * x**np.maximum(a - 1, 0) * y**b
        dy = b * x**a * y**np.maximum(b - 1, 0)
        mono = np.stack([dx, dy], axis=-1)                   # (..., m, 2)
        return np.einsum('...md,mn->...nd', mono, self.coefficients)

    def hessians(self, xi):
        """Reference Hessians (..., n, 2, 2)."""
        a, b = self.exponents[:, 0], self.exponents[:, 1]
        x = xi[..., 0, None]
        y = xi[..., 1, None]
        dxx = a * (a - 1) * x**np.maximum(a - 2, 0) * y**b
        dyy = b * (b - 1) * x**a * y**np.maximum(b - 2, 0)
        dxy = a * b * x**np.maximum(a - 1, 0) * y**np.maximum(b - 1, 0)
        mono = np.stack([np.stack([dxx, dxy], -1), np.stack([dxy, dyy], -1)], -1)
        return np.einsum('...mde,mn->...nde', mono, self.coefficients)


def reference_nodes(degree):
    corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [c for c in corners]
    for k in range(3):
        a, b = corners[(k + 1) % 3], corners[(k + 2) % 3]
        for j in range(1, degree):
            nodes.append(a + (j / degree) * (b - a))
    for j in range(1, degree):
        for i in range(1, degree - j):
            nodes.append(np.array([i / degree, j / degree]))
    return np.array(nodes)


@lru_cache(maxsize=None)
def lagrange_element(degree):
    return LagrangeElement(degree)


def eval_basis(degree, ref_points, derivative_order=0):
    """
    Lagrange shape data on the reference triangle.

    Args:
        degree: polynomial degree.
        ref_points: (..., 2) reference coordinates.
        derivative_order: 0 values, 1 gradients, 2 Hessians.
    """
    element = lagrange_element(degree)
    ref_points = np.asarray(ref_points, dtype=float)
    if derivative_order == 0:
        return element.values(ref_points)
    if derivative_order == 1:
        return element.gradients(ref_points)
    if derivative_order == 2:
        return element.hessians(ref_points)
    raise ConfigurationError(f"Derivative order {derivative_order} is not supported (max 2)")


class LagrangeDofMap:
    """
    Global numbering of degree-k Lagrange nodes: vertices first, then edge nodes
    (ordered from the lower to the higher global vertex of the edge), then interior nodes.
    """
    def __init__(self, mesh, degree):
        self.mesh = mesh
        self.degree = degree
        element = lagrange_element(degree)
        N, E, M = mesh.num_vertices, mesh.num_edges, mesh.num_elements
        per_edge = degree - 1
        per_cell = element.num_local - 3 - 3 * per_edge

        cols = [mesh.elements]
        for k in range(3):
            g = mesh.element_edges[:, k]
            forward = mesh.elements[:, (k + 1) % 3] == mesh.edges[g, 0]
            for j in range(1, degree):
                along = np.where(forward, j - 1, degree - 1 - j)
                cols.append((N + g * per_edge + along)[:, None])
        if per_cell:
            base = N + E * per_edge + np.arange(M)[:, None] * per_cell
            cols.append(base + np.arange(per_cell))
        self.cell_dofs = np.hstack(cols)
        self.num_dofs = N + E * per_edge + M * per_cell

        v0, B, _ = mesh.affine_maps()
        local = v0[:, None, :] + np.einsum('mab,nb->mna', B, element.nodes)
        coords = np.empty((self.num_dofs, 2))
        coords[self.cell_dofs] = local
        self.coordinates = coords

        boundary = np.zeros(self.num_dofs, dtype=bool)
        boundary[:N] = mesh.boundary_vertex_mask()
        bnd_edges = np.flatnonzero(mesh.boundary_edge_mask)
        for j in range(per_edge):
            boundary[N + bnd_edges * per_edge + j] = True
        self.boundary_mask = boundary


class CutSpace:
    """
    Doubled space: one Lagrange copy per side, restricted to that side's active mesh.
    Side NEG numbers first, then side POS.
    """
    def __init__(self, mesh, geometry, degree):
        if degree not in SUPPORTED_DEGREES:
            raise ConfigurationError(f"Degree p={degree} not in {SUPPORTED_DEGREES}")
        self.mesh = mesh
        self.degree = degree
        self.dofmap = LagrangeDofMap(mesh, degree)
        self.side_maps = []
        self.side_dofs = []
        offset = 0
        self.offsets = []
        for active in (geometry.active_neg, geometry.active_pos):
            used = np.unique(self.dofmap.cell_dofs[active])
            numbering = np.full(self.dofmap.num_dofs, -1, dtype=np.int64)
            numbering[used] = offset + np.arange(len(used))
            side_map = np.full_like(self.dofmap.cell_dofs, -1)
            side_map[active] = numbering[self.dofmap.cell_dofs[active]]
            self.side_maps.append(side_map)
            self.side_dofs.append(used)
            self.offsets.append(offset)
            offset += len(used)
        self.num_dofs = offset

    def side_slice(self, side):
        return slice(self.offsets[side], self.offsets[side] + len(self.side_dofs[side]))

    def evaluate(self, coeffs, side, elements, xi, derivative_order=0):
        """
        Reference-space shape data contracted with side coefficients; elements outside
        the side's active mesh evaluate to zero.
        """
        data = eval_basis(self.degree, xi, derivative_order)
        local = self.side_maps[side][elements]
        c = np.where(local >= 0, coeffs[np.maximum(local, 0)], 0.0)
        if derivative_order == 0:
            return np.einsum('eqn,en->eq', data, c)
        if derivative_order == 1:
            return np.einsum('eqnd,en->eqd', data, c)
        return np.einsum('eqnde,en->eqde', data, c)


class DirichletSpace:
    """Standard Lagrange space with all degrees of freedom on the outer boundary removed."""
    def __init__(self, mesh, degree):
        self.mesh = mesh
        self.degree = degree
        self.dofmap = LagrangeDofMap(mesh, degree)
        free = ~self.dofmap.boundary_mask
        numbering = np.full(self.dofmap.num_dofs, -1, dtype=np.int64)
        numbering[free] = np.arange(free.sum())
        self.free_dofs = np.flatnonzero(free)
        self.cell_map = numbering[self.dofmap.cell_dofs]
        self.num_dofs = int(free.sum())


def build_spaces(mesh, geometry, degree):
    return CutSpace(mesh, geometry, degree), DirichletSpace(mesh, degree)


def nodal_interpolate(functions, space, deformation):
    """
    Interpolate one function per side at the deformed Lagrange nodes of that side.

    Args:
        functions: (f_neg, f_pos), each mapping points (..., 2) to values (...).
        space: CutSpace.
        deformation: Deformation (provides the mapped node positions).

    Returns:
        Coefficient vector of length space.num_dofs.
    """
    coeffs = np.zeros(space.num_dofs)
    nodes = lagrange_element(space.degree).nodes
    for side, func in enumerate(functions):
        elements = np.flatnonzero(space.side_maps[side][:, 0] >= 0)
        if len(elements) == 0:
            continue
        xi = np.broadcast_to(nodes, (len(elements),) + nodes.shape)
        points = deformation.map_points(elements, xi)
        values = np.asarray(func(points), dtype=float)
        if not np.all(np.isfinite(values)):
            raise DataError(f"Non-finite interpolation value on side {side}")
        coeffs[space.side_maps[side][elements]] = values
    return coeffs
