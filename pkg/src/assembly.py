from dataclasses import dataclass, field, replace

import numpy as np
import scipy.io
import scipy.sparse as sp

from src.cutgeom import (facet_quadrature, full_element_quadrature, interface_quadrature,
                         reference_quadrature)
from src.errors import MeshTooCoarseError, StructuralError
from src.fespace import NEG, POS, eval_basis

PRIMAL_PARTS = ('gls', 'cip', 'if_jump', 'if_flux', 'if_tangential', 'tik_mass', 'tik_stiffness')


class SparseCollector:
    """
    Accumulates element matrices as COO triplets; entries with a negative row or
    column index (inactive or constrained dofs) are dropped.
    """
    def __init__(self, shape):
        self.shape = shape
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows, cols, local):
        r = np.broadcast_to(rows[:, :, None], local.shape)
        c = np.broadcast_to(cols[:, None, :], local.shape)
        keep = (r >= 0) & (c >= 0)
        self.rows.append(r[keep])
        self.cols.append(c[keep])
        self.vals.append(local[keep])

    def tocsr(self):
        if not self.vals:
            return sp.csr_matrix(self.shape)
        coo = sp.coo_matrix((np.concatenate(self.vals),
                             (np.concatenate(self.rows), np.concatenate(self.cols))), shape=self.shape)
        return coo.tocsr()


def _accumulate(vector, rows, local):
    keep = rows >= 0
    np.add.at(vector, rows[keep], local[keep])


@dataclass
class MappedBasis:
    """Shape data of one quadrature batch pushed through Theta_h."""
    elements: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    hess: np.ndarray = None
    normals: np.ndarray = None


def map_basis(deformation, batch, degree, hessian=False, interface=False):
    pf = deformation.push_forward(batch.elements, batch.xi, hessian=hessian,
                                  normals=batch.normals if interface else None)
    ref_grads = eval_basis(degree, batch.xi, 1)
    hess = pf.hessians(ref_grads, eval_basis(degree, batch.xi, 2)) if hessian else None
    weights = batch.weights * (pf.line_factor if interface else pf.det)
    return MappedBasis(batch.elements, pf.points, weights, eval_basis(degree, batch.xi, 0),
                       pf.gradients(ref_grads), hess, pf.normals)


def volume_chunks(geometry, side, order):
    volume, _ = reference_quadrature(geometry, side, order)
    for batch in volume:
        if not batch.is_empty:
            yield from batch.chunks()


def _interface_chunks(geometry, order):
    batch = interface_quadrature(geometry, order)
    if not batch.is_empty:
        yield from batch.chunks()


def _active_chunks(geometry, side, order):
    batch = full_element_quadrature(geometry.mesh, geometry.active(side), order)
    if not batch.is_empty:
        yield from batch.chunks()


def _mass(mb):
    return np.einsum('eq,eqn,eqm->enm', mb.weights, mb.values, mb.values)


def _stiffness(mb):
    return np.einsum('eq,eqna,eqma->enm', mb.weights, mb.grads, mb.grads)


def strong_operator(mb, mu, rho):
    """Strong operator -mu Lap(v) - rho v of every shape function, (E, Q, n)."""
    return -mu * np.trace(mb.hess, axis1=-2, axis2=-1) - rho * mb.values


def assemble_Ah(problem, geometry, deformation, spaces):
    """
    Coupling block A_h with dual dofs as rows and cut dofs as columns:
    sum_i (mu_i grad u_i, grad w) - (rho_i u_i, w) on the deformed sides, plus the
    adjoint-consistent interface term -int_Gamma (kappa_1 mu_1 + kappa_2 mu_2) grad w.n [u].
    """
    cut, dual = spaces
    order = problem.order
    collector = SparseCollector((dual.num_dofs, cut.num_dofs))
    for side in (NEG, POS):
        mu, rho = problem.mu[side], problem.rho[side]
        for batch in volume_chunks(geometry, side, order):
            mb = map_basis(deformation, batch, cut.degree)
            local = mu * _stiffness(mb) - rho * _mass(mb)
            collector.add(dual.cell_map[mb.elements], cut.side_maps[side][mb.elements], local)

    if problem.stab.include_nc:
        k1, k2 = problem.kappa
        flux = k1 * problem.mu[NEG] + k2 * problem.mu[POS]
        for batch in _interface_chunks(geometry, order):
            mb = map_basis(deformation, batch, cut.degree, interface=True)
            dn = np.einsum('eqna,eqa->eqn', mb.grads, mb.normals)
            base = -flux * np.einsum('eq,eqn,eqm->enm', mb.weights, dn, mb.values)
            for side, sign in ((NEG, 1.0), (POS, -1.0)):
                collector.add(dual.cell_map[mb.elements], cut.side_maps[side][mb.elements], sign * base)
    return collector.tocsr()


def assemble_primal_stab_parts(problem, geometry, deformation, cut_space):
    """
    Unscaled pieces of the primal stabilization, keyed by PRIMAL_PARTS:
    GLS residual products on the deformed sides, mu-weighted normal-gradient jumps on
    the facets of each active mesh, the three interface jump forms and the Tikhonov
    mass and stiffness on the full deformed active meshes.
    """
    mesh = geometry.mesh
    order = problem.order
    N = cut_space.num_dofs
    degree = cut_space.degree
    parts = {name: SparseCollector((N, N)) for name in PRIMAL_PARTS}

    # 1. Galerkin least squares
    for side in (NEG, POS):
        mu, rho = problem.mu[side], problem.rho[side]
        for batch in volume_chunks(geometry, side, order):
            mb = map_basis(deformation, batch, degree, hessian=True)
            L = strong_operator(mb, mu, rho)
            dofs = cut_space.side_maps[side][mb.elements]
            parts['gls'].add(dofs, dofs, np.einsum('eq,eqn,eqm->enm', mb.weights, L, L))

    # 2. Continuous interior penalty on the full deformed facets
    for side in (NEG, POS):
        facets = mesh.facets_within(geometry.active_mask(side))
        if len(facets) == 0:
            continue
        side_map = cut_space.side_maps[side]
        for fq in facet_quadrature(mesh, facets, order).chunks():
            left = deformation.push_forward(fq.left, fq.xi_left, normals=fq.normals)
            right = deformation.push_forward(fq.right, fq.xi_right)
            gl = left.gradients(eval_basis(degree, fq.xi_left, 1))
            gr = right.gradients(eval_basis(degree, fq.xi_right, 1))
            n = left.normals
            jump = np.concatenate([np.einsum('eqna,eqa->eqn', gl, n),
                                   -np.einsum('eqna,eqa->eqn', gr, n)], axis=-1)
            w = problem.mu[side] * fq.weights * left.line_factor
            dofs = np.hstack([side_map[fq.left], side_map[fq.right]])
            parts['cip'].add(dofs, dofs, np.einsum('eq,eqi,eqj->eij', w, jump, jump))

    # 3. Interface jumps of value, flux and tangential gradient
    mu1, mu2 = problem.mu
    for batch in _interface_chunks(geometry, order):
        mb = map_basis(deformation, batch, degree, interface=True)
        dofs = np.hstack([cut_space.side_maps[NEG][mb.elements], cut_space.side_maps[POS][mb.elements]])
        w = mb.weights
        value = np.concatenate([mb.values, -mb.values], axis=-1)
        dn = np.einsum('eqna,eqa->eqn', mb.grads, mb.normals)
        flux = np.concatenate([mu1 * dn, -mu2 * dn], axis=-1)
        tangential = mb.grads - dn[..., None] * mb.normals[:, :, None, :]
        tangential = np.concatenate([tangential, -tangential], axis=2)
        parts['if_jump'].add(dofs, dofs, np.einsum('eq,eqi,eqj->eij', w, value, value))
        parts['if_flux'].add(dofs, dofs, np.einsum('eq,eqi,eqj->eij', w, flux, flux))
        parts['if_tangential'].add(dofs, dofs, np.einsum('eq,eqia,eqja->eij', w, tangential, tangential))

    # 4. Tikhonov on the full active meshes
    for side in (NEG, POS):
        for batch in _active_chunks(geometry, side, order):
            mb = map_basis(deformation, batch, degree)
            dofs = cut_space.side_maps[side][mb.elements]
            parts['tik_mass'].add(dofs, dofs, _mass(mb))
            parts['tik_stiffness'].add(dofs, dofs, _stiffness(mb))

    return {name: c.tocsr() for name, c in parts.items()}


def combine_primal_stab(parts, problem, h):
    """Weighted sum of the unscaled parts into s_h."""
    st = problem.stab
    mu_bar = 0.5 * (problem.mu[NEG] + problem.mu[POS])
    s = (st.gamma_gls * h**2 * parts['gls']
         + st.gamma_cip * h * parts['cip']
         + st.gamma_if * (mu_bar / h * parts['if_jump'] + h * parts['if_flux']
                          + h * mu_bar * parts['if_tangential'])
         + h**(2 * problem.q) * (st.alpha1 * parts['tik_mass'] + st.alpha2 * parts['tik_stiffness']))
    return s.tocsr()


def assemble_primal_stab(problem, geometry, deformation, cut_space):
    parts = assemble_primal_stab_parts(problem, geometry, deformation, cut_space)
    return combine_primal_stab(parts, problem, geometry.mesh.h)


def _dual_stiffness(problem, geometry, deformation, dual_space, weights):
    collector = SparseCollector((dual_space.num_dofs, dual_space.num_dofs))
    for side in (NEG, POS):
        for batch in volume_chunks(geometry, side, problem.order):
            mb = map_basis(deformation, batch, dual_space.degree)
            dofs = dual_space.cell_map[mb.elements]
            collector.add(dofs, dofs, weights[side] * _stiffness(mb))
    return collector.tocsr()


def assemble_dual_stab(problem, geometry, deformation, dual_space):
    """s*(z, w) = (mu grad z, grad w) over the deformed domain."""
    return _dual_stiffness(problem, geometry, deformation, dual_space, problem.mu)


def omega_elements(problem, geometry, deformation):
    """
    Elements whose centroid lies in the data domain; all of them must be uncut,
    on the data side and left undeformed.
    """
    mesh = geometry.mesh
    elements = np.flatnonzero(problem.omega.contains(mesh.centroids()))
    if len(elements) == 0:
        raise MeshTooCoarseError("Mesh too coarse for omega: no element centroid inside the data domain")
    wrong = geometry.labels[elements] != problem.omega_side
    if np.any(wrong):
        raise MeshTooCoarseError(
            f"Mesh too coarse for omega: element {elements[np.argmax(wrong)]} is cut or on the other side")
    deformed = np.isin(elements, deformation.support_elements)
    if np.any(deformed):
        raise MeshTooCoarseError(
            f"Mesh too coarse for omega: element {elements[np.argmax(deformed)]} is deformed")
    return elements


def assemble_omega_mass(problem, geometry, deformation, cut_space):
    side = problem.omega_side
    collector = SparseCollector((cut_space.num_dofs, cut_space.num_dofs))
    batch = full_element_quadrature(geometry.mesh, omega_elements(problem, geometry, deformation), problem.order)
    for chunk in batch.chunks():
        mb = map_basis(deformation, chunk, cut_space.degree)
        dofs = cut_space.side_maps[side][mb.elements]
        collector.add(dofs, dofs, _mass(mb))
    return collector.tocsr()


def assemble_volume_mass(problem, geometry, deformation, cut_space):
    """Side-wise L2 mass on the deformed subdomains Omega_{i,h}."""
    collector = SparseCollector((cut_space.num_dofs, cut_space.num_dofs))
    for side in (NEG, POS):
        for batch in volume_chunks(geometry, side, problem.order):
            mb = map_basis(deformation, batch, cut_space.degree)
            dofs = cut_space.side_maps[side][mb.elements]
            collector.add(dofs, dofs, _mass(mb))
    return collector.tocsr()


@dataclass(frozen=True)
class MeasurementData:
    """
    Data of one level: the closed-form solution and sources plus finite element
    perturbations `du_omega` (on the data-domain dofs) and `df` (both sides),
    both stored as cut-space coefficient vectors.
    """
    solution: object
    omega_mass: sp.csr_matrix = field(repr=False)
    volume_mass: sp.csr_matrix = field(repr=False)
    du_omega: np.ndarray = field(repr=False)
    df: np.ndarray = field(repr=False)
    delta: float = 0.0

    @property
    def omega_dofs(self):
        return np.flatnonzero(self.omega_mass.diagonal() > 0)

    def noise_norms(self):
        """(||du_omega||_omega, ||df||) in L2."""
        return (float(np.sqrt(self.du_omega @ (self.omega_mass @ self.du_omega))),
                float(np.sqrt(self.df @ (self.volume_mass @ self.df))))


def build_exact_data(problem, geometry, deformation, cut_space, omega_mass=None):
    if omega_mass is None:
        omega_mass = assemble_omega_mass(problem, geometry, deformation, cut_space)
    volume_mass = assemble_volume_mass(problem, geometry, deformation, cut_space)
    zeros = np.zeros(cut_space.num_dofs)
    return MeasurementData(problem.solution, omega_mass, volume_mass, zeros, zeros.copy())


def apply_noise(data, delta_tilde, theta, p, h, seed):
    """
    Perturb the data with seeded uniform noise, scaled so that
    ||du_omega||_omega = ||df|| = delta / 2 with delta = delta_tilde h^(p - theta).
    """
    if delta_tilde == 0:
        return data
    delta = delta_tilde * h ** (p - theta)
    rng = np.random.default_rng(seed)
    du = np.zeros_like(data.du_omega)
    omega_dofs = data.omega_dofs
    du[omega_dofs] = rng.uniform(-1.0, 1.0, len(omega_dofs))
    df = rng.uniform(-1.0, 1.0, len(data.df))

    norm_u = np.sqrt(du @ (data.omega_mass @ du))
    norm_f = np.sqrt(df @ (data.volume_mass @ df))
    du *= 0.5 * delta / norm_u
    df *= 0.5 * delta / norm_f
    return replace(data, du_omega=du, df=df, delta=delta)


def _field(coeffs, side_map, mb):
    c = coeffs[np.maximum(side_map[mb.elements], 0)]
    return np.einsum('eqn,en->eq', mb.values, c)


def assemble_rhs(problem, geometry, deformation, spaces, data):
    """
    Right-hand side [u-block, z-block]: the measurement term on omega plus the GLS data
    term, and the source functional sum_i int_{Omega_i,h} f_i w.
    """
    cut, dual = spaces
    h = geometry.mesh.h
    sol = data.solution
    order = problem.order
    b_u = np.zeros(cut.num_dofs)
    b_z = np.zeros(dual.num_dofs)

    # 1. Measurement term on omega
    side = problem.omega_side
    batch = full_element_quadrature(geometry.mesh, omega_elements(problem, geometry, deformation), order)
    for chunk in batch.chunks():
        mb = map_basis(deformation, chunk, cut.degree)
        u_tilde = sol.value(side, mb.points) + _field(data.du_omega, cut.side_maps[side], mb)
        _accumulate(b_u, cut.side_maps[side][mb.elements],
                    np.einsum('eq,eq,eqn->en', mb.weights, u_tilde, mb.values))

    # 2. Source functional and GLS data term
    gamma = problem.stab.gamma_gls
    for side in (NEG, POS):
        mu, rho = problem.mu[side], problem.rho[side]
        for batch in volume_chunks(geometry, side, order):
            mb = map_basis(deformation, batch, cut.degree, hessian=gamma > 0)
            f = sol.source(side, mb.points) + _field(data.df, cut.side_maps[side], mb)
            _accumulate(b_z, dual.cell_map[mb.elements], np.einsum('eq,eq,eqn->en', mb.weights, f, mb.values))
            if gamma > 0:
                L = strong_operator(mb, mu, rho)
                _accumulate(b_u, cut.side_maps[side][mb.elements],
                            gamma * h**2 * np.einsum('eq,eq,eqn->en', mb.weights, f, L))
    return np.concatenate([b_u, b_z])


@dataclass
class SaddleSystem:
    """
    K = [[s_h + M_omega, A_h^T], [A_h, -s*]] with the primal (cut space) block first.
    """
    matrix: sp.csc_matrix
    rhs: np.ndarray
    n_primal: int
    n_dual: int
    blocks: dict = field(repr=False)
    parts: dict = field(default_factory=dict, repr=False)
    h: float = None

    @property
    def size(self):
        return self.n_primal + self.n_dual

    def split(self, x):
        return x[:self.n_primal], x[self.n_primal:]

    def symmetry_error(self):
        """max |K - K^T| / max |K|."""
        K = self.matrix
        scale = abs(K).max()
        if scale == 0:
            return 0.0
        return float(abs(K - K.T).max() / scale)

    def bilinear(self, u, z, v, w):
        """B_h[(u, z), (v, w)]."""
        return float(np.concatenate([v, w]) @ (self.matrix @ np.concatenate([u, z])))


def _symmetric(M):
    return (0.5 * (M + M.T)).tocsr()


def build_saddle_system(blocks, rhs, parts=None, h=None):
    """
    Args:
        blocks: dict with 's_h', 'mass_omega' (primal x primal), 'A_h' (dual x primal)
            and 's_star' (dual x dual).
        rhs: vector of length n_primal + n_dual.
    """
    S, M, A, D = blocks['s_h'], blocks['mass_omega'], blocks['A_h'], blocks['s_star']
    n, m = S.shape[0], D.shape[0]
    if S.shape != (n, n) or M.shape != (n, n) or A.shape != (m, n) or D.shape != (m, m):
        raise StructuralError(
            f"Block shapes do not fit: s_h {S.shape}, M_omega {M.shape}, A_h {A.shape}, s* {D.shape}")
    if len(rhs) != n + m:
        raise StructuralError(f"Right-hand side has length {len(rhs)}, expected {n + m}")
    K = sp.bmat([[_symmetric(S + M), A.T], [A, -_symmetric(D)]], format='csc')
    return SaddleSystem(K, np.asarray(rhs, dtype=float), n, m, blocks, parts or {}, h)


def assemble_system(problem, geometry, deformation, spaces, data):
    """Assemble every block and the right-hand side of one level."""
    cut, dual = spaces
    h = geometry.mesh.h
    parts = assemble_primal_stab_parts(problem, geometry, deformation, cut)
    parts['dual_stiffness'] = _dual_stiffness(problem, geometry, deformation, dual, (1.0, 1.0))
    blocks = {
        's_h': combine_primal_stab(parts, problem, h),
        'mass_omega': data.omega_mass,
        'A_h': assemble_Ah(problem, geometry, deformation, spaces),
        's_star': assemble_dual_stab(problem, geometry, deformation, dual),
    }
    rhs = assemble_rhs(problem, geometry, deformation, spaces, data)
    return build_saddle_system(blocks, rhs, parts, h)


def _quadratic(M, x):
    return float(max(x @ (M @ x), 0.0))


def eval_diagnostics(system, u, z, u_ref=None, z_ref=None):
    """
    Stabilization norms and the triple norm of (u - u_ref, z - z_ref).

    Returns:
        dict with 's_norm', 'omega_norm', 'dual_norm', 'tnorm', and when the level
        parts are available 'dual_grad', 'jump_half_norm', 'flux_half_norm'.
    """
    e_u = u if u_ref is None else u - u_ref
    e_z = z if z_ref is None else z - z_ref
    s2 = _quadratic(system.blocks['s_h'], e_u)
    m2 = _quadratic(system.blocks['mass_omega'], e_u)
    d2 = _quadratic(system.blocks['s_star'], e_z)
    out = {'s_norm': np.sqrt(s2), 'omega_norm': np.sqrt(m2), 'dual_norm': np.sqrt(d2),
           'tnorm': np.sqrt(s2 + m2 + d2)}
    parts, h = system.parts, system.h
    if 'dual_stiffness' in parts:
        out['dual_grad'] = np.sqrt(_quadratic(parts['dual_stiffness'], z))
    if 'if_jump' in parts and h:
        out['jump_half_norm'] = np.sqrt(_quadratic(parts['if_jump'], e_u) / h)
        out['flux_half_norm'] = np.sqrt(h * _quadratic(parts['if_flux'], e_u))
    return out


def eval_stab_consistency(problem, geometry, deformation, cut_space, system, u):
    """
    sqrt(S_h(u)) of a primal field against the exact source: the GLS part is the residual
    gamma_GLS h^2 sum_i ||f_i - L_i u||^2 on the deformed sides, the remaining parts are
    the quadratic forms of s_h. For u = I_h u this decays like h^q.
    """
    if 'gls' not in system.parts:
        raise StructuralError("Stabilization consistency needs the assembled primal parts")
    h = system.h
    gamma = problem.stab.gamma_gls
    rest = _quadratic(system.blocks['s_h'] - gamma * h**2 * system.parts['gls'], u)

    residual = 0.0
    sol = problem.solution
    for side in (NEG, POS):
        mu, rho = problem.mu[side], problem.rho[side]
        for batch in volume_chunks(geometry, side, problem.order):
            mb = map_basis(deformation, batch, cut_space.degree, hessian=True)
            coeffs = u[np.maximum(cut_space.side_maps[side][mb.elements], 0)]
            Lu = np.einsum('eqn,en->eq', strong_operator(mb, mu, rho), coeffs)
            residual += float(np.sum(mb.weights * (Lu - sol.source(side, mb.points))**2))
    return np.sqrt(rest + gamma * h**2 * residual)


def export_matrix_market(system, path):
    scipy.io.mmwrite(path, system.matrix.tocoo(), comment='unique continuation saddle-point system')
