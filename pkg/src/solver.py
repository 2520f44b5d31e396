import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from src.errors import SolverError

RESIDUAL_TOL = 1e-8
REFINE_TOL = 1e-10
MAX_REFINEMENT_STEPS = 2
DEFAULT_ORDERING = 'MMD_AT_PLUS_A'
FALLBACK_ORDERING = 'COLAMD'
# orderings factored in symmetric mode
SYMMETRIC_ORDERINGS = ('MMD_AT_PLUS_A', 'NATURAL')
DIAG_PIVOT_THRESH = 0.01


@dataclass
class Solution:
    u: np.ndarray
    z: np.ndarray
    residual: float
    nnz_matrix: int
    nnz_factor: int
    refinement_steps: int = 0
    status: str = 'ok'
    ordering: str = DEFAULT_ORDERING

    @property
    def fill(self):
        return self.nnz_factor / max(self.nnz_matrix, 1)


def _relative_residual(K, x, b):
    return float(np.linalg.norm(K @ x - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def _factorize(K, permc_spec):
    if permc_spec in SYMMETRIC_ORDERINGS:
        kwargs = dict(diag_pivot_thresh=DIAG_PIVOT_THRESH, options=dict(SymmetricMode=True))
    else:
        kwargs = {}
    try:
        lu = splu(K, permc_spec=permc_spec, **kwargs)
    except RuntimeError as exc:
        raise SolverError(f"Sparse LU ({permc_spec}) failed: {exc}") from exc

    diag = np.abs(lu.U.diagonal())
    scale = diag.max() if len(diag) else 0.0
    bad = ~np.isfinite(diag) | (diag <= 1e-18 * scale)
    if scale == 0.0 or np.any(bad):
        pivot = int(np.argmax(bad)) if scale else 0
        raise SolverError(f"Numerically singular factorization at pivot {pivot} of {len(diag)}",
                          pivot=pivot)
    return lu


def _solve_refined(K, b, lu):
    x = lu.solve(b)
    residual = _relative_residual(K, x, b)
    steps = 0
    while residual > REFINE_TOL and steps < MAX_REFINEMENT_STEPS:
        x = x + lu.solve(b - K @ x)
        residual = _relative_residual(K, x, b)
        steps += 1
    return x, residual, steps


def solve_sparse(system, permc_spec=DEFAULT_ORDERING):
    """
    Solve the saddle-point system with SuperLU.

    The default ordering is minimum degree on A + A^T with diagonal pivots preferred.
    If that factorization fails or its refined residual stays above 1e-8, the system
    is refactored with COLAMD and partial pivoting and the better solve is kept.
    Up to two steps of iterative refinement are taken when the relative residual
    exceeds 1e-10; a residual above 1e-8 after the last attempt only warns.

    Returns:
        Solution with the (u, z) blocks split back out.
    """
    K = sp.csc_matrix(system.matrix)
    b = np.asarray(system.rhs, dtype=float)
    if K.shape[0] == 0:
        return Solution(np.zeros(0), np.zeros(0), 0.0, 0, 0, ordering=permc_spec)

    orderings = [permc_spec]
    if permc_spec in SYMMETRIC_ORDERINGS:
        orderings.append(FALLBACK_ORDERING)
    best = None
    for ordering in orderings:
        try:
            lu = _factorize(K, ordering)
        except SolverError:
            if best is None and ordering == orderings[-1]:
                raise
            continue
        x, residual, steps = _solve_refined(K, b, lu)
        if best is None or residual < best[2]:
            best = (ordering, lu, residual, x, steps)
        if residual <= RESIDUAL_TOL:
            break
    ordering, lu, residual, x, steps = best

    status = 'ok'
    if residual > RESIDUAL_TOL:
        status = 'warning'
        warnings.warn(f"Relative residual {residual:.3e} exceeds {RESIDUAL_TOL:g} after {steps} refinement steps")

    u, z = system.split(x)
    return Solution(u, z, residual, K.nnz, lu.L.nnz + lu.U.nnz, steps, status, ordering)
