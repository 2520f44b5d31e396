import warnings
from dataclasses import dataclass

import numpy as np

from src.cutgeom import full_element_quadrature, interface_quadrature
from src.errors import ConfigurationError, GeometryError
from src.fespace import LagrangeDofMap, lagrange_element

DEFAULT_CLAMP = 0.45


class NodalField:
    """Scalar degree-q Lagrange field given by its nodal values."""
    def __init__(self, dofmap, values):
        self.dofmap = dofmap
        self.values = values

    @property
    def degree(self):
        return self.dofmap.degree

    def local_eval(self, elements, points):
        """
        Evaluate the element polynomials of `elements` at physical `points`
        (polynomial extension outside the element).

        Returns:
            values (...), physical gradients (..., 2)
        """
        mesh = self.dofmap.mesh
        element = lagrange_element(self.degree)
        _, _, Binv = mesh.affine_maps()
        xi = mesh.to_reference(elements, points)
        c = self.values[self.dofmap.cell_dofs[elements]]
        vals = np.einsum('...n,...n->...', element.values(xi), c)
        ref_grad = np.einsum('...nd,...n->...d', element.gradients(xi), c)
        grad = np.einsum('...ba,...b->...a', Binv[elements], ref_grad)
        return vals, grad


def interpolate_q(levelset, mesh, q):
    """Nodal interpolant of the levelset at the degree-q Lagrange nodes."""
    if q < 1:
        raise ConfigurationError(f"Geometry order q must be >= 1, got {q}")
    dofmap = LagrangeDofMap(mesh, q)
    return NodalField(dofmap, np.asarray(levelset(dofmap.coordinates), dtype=float))


@dataclass
class PushForward:
    """
    Geometry of Theta_h at a batch of reference points.

    `jacobian` is D Theta_h with respect to the piecewise linear configuration,
    `ref_jacobian` the derivative of the full map from the reference triangle.
    """
    points: np.ndarray
    jacobian: np.ndarray
    det: np.ndarray
    jacobian_inv_t: np.ndarray
    ref_jacobian: np.ndarray
    ref_jacobian_inv: np.ndarray
    ref_hessians: np.ndarray = None
    normals: np.ndarray = None
    line_factor: np.ndarray = None

    def gradients(self, ref_grads):
        """Physical gradients (..., n, 2) of mapped shape functions."""
        return np.einsum('...ba,...nb->...na', self.ref_jacobian_inv, ref_grads)

    def hessians(self, ref_grads, ref_hess):
        """Physical Hessians (..., n, 2, 2) of mapped shape functions."""
        g = self.gradients(ref_grads)
        X = ref_hess
        if self.ref_hessians is not None:
            X = ref_hess - np.einsum('...nk,...kij->...nij', g, self.ref_hessians)
        Ginv = self.ref_jacobian_inv
        return np.einsum('...ia,...nij,...jb->...nab', Ginv, X, Ginv)


class Deformation:
    """
    Continuous degree-q displacement D = Theta_h - id stored at the degree-q
    Lagrange nodes of the background mesh.
    """
    def __init__(self, mesh, order, displacement=None, failed_nodes=0, local_displacements=None):
        self.mesh = mesh
        self.order = order
        self.dofmap = LagrangeDofMap(mesh, order)
        if displacement is None:
            displacement = np.zeros((self.dofmap.num_dofs, 2))
        self.displacement = np.asarray(displacement, dtype=float)
        self.failed_nodes = failed_nodes
        self.local_displacements = local_displacements
        moved = np.any(self.displacement != 0.0, axis=1)
        self.support_elements = np.flatnonzero(np.any(moved[self.dofmap.cell_dofs], axis=1))
        self._affine = mesh.affine_maps()

    @classmethod
    def identity(cls, mesh, order=1):
        return cls(mesh, order)

    def __repr__(self):
        return (f"Deformation(q={self.order}, {len(self.support_elements)} deformed elements, "
                f"max |D|={self.max_displacement():.3e})")

    def max_displacement(self):
        if len(self.displacement) == 0:
            return 0.0
        return float(np.linalg.norm(self.displacement, axis=1).max())

    def map_points(self, elements, xi):
        v0, B, _ = self._affine
        elements = np.asarray(elements)
        e = elements.reshape(elements.shape + (1,) * (xi.ndim - 1 - elements.ndim))
        lin = v0[e] + np.einsum('...ab,...b->...a', B[e], xi)
        psi = lagrange_element(self.order).values(xi)
        D = self.displacement[self.dofmap.cell_dofs[elements]]         # (E, n, 2)
        return lin + np.einsum('e...n,ena->e...a', psi, D)

    def push_forward(self, elements, xi, hessian=False, normals=None):
        """
        Mapped points, Jacobians and optionally Hessians and interface data.

        Args:
            elements: (E,) element indices.
            xi: (E, Q, 2) reference coordinates.
            hessian: also return reference Hessians of the components of Theta_h.
            normals: (E, Q, 2) unit normals of the piecewise linear configuration.
        """
        v0, B, Binv = self._affine
        element = lagrange_element(self.order)
        D = self.displacement[self.dofmap.cell_dofs[elements]]         # (E, n, 2)
        Be = B[elements][:, None]
        points = v0[elements][:, None] + np.einsum('eab,eqb->eqa', B[elements], xi)
        points = points + np.einsum('eqn,ena->eqa', element.values(xi), D)

        DG = Be + np.einsum('ena,eqnb->eqab', D, element.gradients(xi))
        J = DG @ Binv[elements][:, None]
        det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(det <= 0):
            bad = np.argwhere(det <= 0)[0]
            raise GeometryError(
                f"det(D Theta_h) = {det[tuple(bad)]:.3e} <= 0 in element {elements[bad[0]]}",
                element=int(elements[bad[0]]))
        DGinv = np.linalg.inv(DG)
        Jinv_t = np.swapaxes(np.linalg.inv(J), -1, -2)

        pf = PushForward(points, J, det, Jinv_t, DG, DGinv)
        if hessian:
            pf.ref_hessians = np.einsum('ena,eqnij->eqaij', D, element.hessians(xi))
        if normals is not None:
            m = np.einsum('eqab,eqb->eqa', Jinv_t, normals)
            norm = np.linalg.norm(m, axis=-1)
            pf.normals = m / norm[..., None]
            pf.line_factor = det * norm
        return pf


def build_deformation(geometry, phi_h, q, clamp=DEFAULT_CLAMP, tol=1e-12, maxiter=60, pinned_elements=None):
    """
    Isoparametric displacement moving the piecewise linear interface toward the zero
    level of the degree-q interpolant `phi_h`.

    For every degree-q node of a cut element the search direction is the normalized
    gradient of the element polynomial of phi_h, and the displacement solves
    phi_h(x + d G) = phi_hat(x) for the root closest to d = 0 within |d| <= clamp * h
    (Newton with bisection fallback).

    The gradient of phi_h jumps across element edges, so a vertex or edge node shared by
    several cut elements gets one direction and one displacement per element; these are
    kept in `local_displacements` and the global field at the node is their mean over the
    cut elements containing it. Nodes inside a single element keep their own value.
    Nodes of `pinned_elements` (the data domain) keep zero displacement.

    Returns:
        Deformation
    """
    mesh = geometry.mesh
    if q < 1:
        raise ConfigurationError(f"Geometry order q must be >= 1, got {q}")
    if q == 1 or len(geometry.cut_elements) == 0:
        return Deformation(mesh, q)

    cut = geometry.cut_elements
    element = lagrange_element(q)
    v0, B, _ = mesh.affine_maps()
    xi = np.broadcast_to(element.nodes, (len(cut),) + element.nodes.shape)
    x = v0[cut][:, None] + np.einsum('eab,enb->ena', B[cut], xi)     # (C, n, 2)

    # 1. Piecewise linear target value at every node
    vals = geometry.vertex_values[mesh.elements[cut]]
    lam = np.stack([1.0 - xi[..., 0] - xi[..., 1], xi[..., 0], xi[..., 1]], axis=-1)
    target = np.einsum('enk,ek->en', lam, vals)

    # 2. Search direction from the element polynomial of phi_h
    elements = np.broadcast_to(cut[:, None], target.shape)
    _, grad = phi_h.local_eval(elements, x)
    G = grad / np.maximum(np.linalg.norm(grad, axis=-1), 1e-300)[..., None]

    def g(d):
        val, gr = phi_h.local_eval(elements, x + d[..., None] * G)
        return val - target, np.einsum('...a,...a->...', gr, G)

    # 3. Safeguarded Newton on [-delta, delta]
    delta = clamp * mesh.h
    lo = np.full(target.shape, -delta)
    hi = np.full(target.shape, delta)
    g_lo, _ = g(lo)
    g_hi, _ = g(hi)
    g0, _ = g(np.zeros_like(target))
    bracketed = (g_lo * g_hi <= 0) | (np.abs(g0) <= tol)
    failed = ~bracketed

    d = np.zeros_like(target)
    active = bracketed & (np.abs(g0) > tol)
    for _ in range(maxiter):
        if not np.any(active):
            break
        gd, dg = g(d)
        done = np.abs(gd) <= tol
        active &= ~done
        same = np.sign(gd) == np.sign(g_lo)
        lo = np.where(active & same, d, lo)
        g_lo = np.where(active & same, gd, g_lo)
        hi = np.where(active & ~same, d, hi)
        with np.errstate(divide='ignore', invalid='ignore'):
            newton = d - gd / dg
        a, b = np.minimum(lo, hi), np.maximum(lo, hi)
        inside = np.isfinite(newton) & (newton > a) & (newton < b)
        step = np.where(inside, newton, 0.5 * (lo + hi))
        d = np.where(active, step, d)
        active &= (b - a) > 1e-15 * delta

    d = np.where(failed, 0.0, d)
    local = d[..., None] * G

    # 4. Average the element-wise displacements into one continuous field
    dofs = LagrangeDofMap(mesh, q)
    cell_dofs = dofs.cell_dofs[cut]
    total = np.zeros((dofs.num_dofs, 2))
    count = np.zeros(dofs.num_dofs)
    np.add.at(total, cell_dofs.ravel(), local.reshape(-1, 2))
    np.add.at(count, cell_dofs.ravel(), 1.0)
    displacement = np.divide(total, count[:, None], out=np.zeros_like(total), where=count[:, None] > 0)
    if pinned_elements is not None and len(pinned_elements):
        displacement[np.unique(dofs.cell_dofs[pinned_elements])] = 0.0

    # failed nodes are reported per global node
    failed_global = np.zeros(dofs.num_dofs, dtype=bool)
    failed_global[cell_dofs[failed]] = True
    n_failed = int(failed_global.sum())
    if n_failed:
        warnings.warn(f"{n_failed} isoparametric nodes have no root within the clamp and stay undisplaced")
    return Deformation(mesh, q, displacement, failed_nodes=n_failed, local_displacements=local)


def geometry_error_probe(deformation, levelset, geometry, order=6):
    """Max of |phi(Theta_h(x))| over the interface quadrature points."""
    rule = interface_quadrature(geometry, order)
    if rule.is_empty:
        return 0.0
    points = deformation.map_points(rule.elements, rule.xi)
    return float(np.abs(levelset(points)).max())


def normal_error(deformation, levelset, geometry, order=6):
    """Max of |n_h - grad phi / |grad phi|| at the mapped interface quadrature points."""
    rule = interface_quadrature(geometry, order)
    if rule.is_empty:
        return 0.0
    pf = deformation.push_forward(rule.elements, rule.xi, normals=rule.normals)
    grad = levelset.gradient(pf.points)
    exact = grad / np.linalg.norm(grad, axis=-1)[..., None]
    return float(np.linalg.norm(pf.normals - exact, axis=-1).max())


def jacobian_deviation(deformation, order=4):
    """
    Max of |det D Theta_h - 1| over quadrature points of the deformed elements. The
    displacement is O(h^2) for every q >= 2, so this decays like h.
    """
    elements = deformation.support_elements
    if len(elements) == 0:
        return 0.0
    rule = full_element_quadrature(deformation.mesh, elements, order)
    pf = deformation.push_forward(rule.elements, rule.xi)
    return float(np.abs(pf.det - 1.0).max())


def write_displacement_csv(deformation, path):
    coords = deformation.dofmap.coordinates
    D = deformation.displacement
    table = np.column_stack([np.arange(len(D)), coords, D, np.linalg.norm(D, axis=1)])
    np.savetxt(path, table, delimiter=',', header='dof,x,y,dx,dy,magnitude', comments='',
               fmt=['%d', '%.17g', '%.17g', '%.17g', '%.17g', '%.17g'])
