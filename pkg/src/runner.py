import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import gamma

from src.assembly import (apply_noise, assemble_system, build_exact_data, eval_diagnostics,
                          eval_stab_consistency, export_matrix_market, map_basis, volume_chunks)
from src.cutgeom import build_cut_geometry
from src.errors import ConfigurationError, DataError, StageError
from src.fespace import NEG, POS, build_spaces, nodal_interpolate
from src.isomap import (build_deformation, geometry_error_probe, interpolate_q, jacobian_deviation,
                        normal_error, write_displacement_csv)
from src.mesh import build_structured_mesh, uniform_refine
from src.problems import make_problem
from src.solver import solve_sparse

CSV_HEADER = 'level,h,ndof,rel_l2_B,rel_h1semi_B,tnorm_err,dual_grad,geom_probe,runtime_s'
SWEEP_HEADER = 'value,rel_l2_B,rel_h1semi_B'
GEOMETRY_HEADER = 'level,h,geom_probe,area_error,normal_error,det_deviation'
ERROR_COLUMNS = ('rel_l2_B', 'rel_h1semi_B', 'tnorm_err', 'dual_grad', 'geom_probe', 'stab_consistency')
SWEEP_AXES = ('gammaIF', 'alpha2', 'kappaMode', 'includeNc', 'wavenumber', 'contrast')
STUDIES = ('convergence', 'sweep', 'geometry')


@dataclass(frozen=True)
class SweepConfig:
    axis: str
    values: tuple
    level: int = None

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigurationError(f"Unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")
        if not self.values:
            raise ConfigurationError("Sweep needs at least one value")

    @classmethod
    def parse(cls, text):
        """`axis=v1,v2,...` as given on the command line."""
        if '=' not in text:
            raise ConfigurationError(f"Sweep must look like axis=v1,v2,..., got {text!r}")
        axis, values = text.split('=', 1)
        return cls(axis.strip(), tuple(v.strip() for v in values.split(',') if v.strip()))


@dataclass(frozen=True)
class ExportConfig:
    vtk: bool = False
    matrix_market: bool = False
    displacement_csv: bool = False


def _nested_config(cls, values, key):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"Unknown {key} keys {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"Invalid {key} section: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One study as read from a JSON file.

    Keys: problem, study, overrides, levels, seed, out, deterministic, sweep, export.
    """
    problem: str
    study: str = 'convergence'
    overrides: dict = field(default_factory=dict)
    levels: int = 4
    seed: int = None
    out: str = 'results.csv'
    deterministic: bool = False
    sweep: SweepConfig = None
    export: ExportConfig = ExportConfig()
    verbose: bool = True

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigurationError(f"Unknown study {self.study!r}; choose from {STUDIES}")
        if self.levels < 1:
            raise ConfigurationError(f"Need at least one level, got {self.levels}")
        if self.study == 'sweep' and self.sweep is None:
            raise ConfigurationError("Sweep study without a `sweep` section")

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"Unknown config keys {sorted(unknown)}")
        if 'problem' not in data:
            raise ConfigurationError("Config needs a `problem` catalog id")
        if isinstance(data.get('sweep'), dict):
            sweep = dict(data['sweep'])
            sweep['values'] = tuple(str(v) for v in sweep.get('values', ()))
            data['sweep'] = _nested_config(SweepConfig, sweep, 'sweep')
            data.setdefault('study', 'sweep')
        if isinstance(data.get('export'), dict):
            data['export'] = _nested_config(ExportConfig, data['export'], 'export')
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"Cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def with_overrides(self, levels=None, p=None, q=None, sweep=None, seed=None, out=None, quiet=False):
        """Apply command-line flags on top of the file values."""
        overrides = dict(self.overrides)
        if p is not None:
            overrides['p'] = p
        if q is not None:
            overrides['q'] = q
        changes = {'overrides': overrides}
        if levels is not None:
            changes['levels'] = levels
        if seed is not None:
            changes['seed'] = seed
        if out is not None:
            changes['out'] = out
        if sweep is not None:
            changes['sweep'] = SweepConfig.parse(sweep)
            changes['study'] = 'sweep'
        if quiet:
            changes['verbose'] = False
        return replace(self, **changes)

    def build_problem(self, extra=None):
        overrides = dict(self.overrides)
        for key, value in (extra or {}).items():
            if isinstance(value, dict):
                merged = dict(overrides.get(key, {}))
                merged.update(value)
                overrides[key] = merged
            else:
                overrides[key] = value
        problem = make_problem(self.problem, overrides)
        if self.seed is not None:
            problem = replace(problem, noise=replace(problem.noise, seed=self.seed))
        return problem


@contextmanager
def stage(name, level):
    """Re-raise any failure inside the block as a StageError tagged with `name` and `level`."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, level, exc) from exc


def _log(verbose, message):
    if verbose:
        print(message)


def build_level_mesh(problem, level):
    mesh = build_structured_mesh(problem.domain, problem.n0, problem.align_boxes())
    for _ in range(level):
        mesh = uniform_refine(mesh)
    return mesh


def build_level_deformation(problem, geometry):
    """Theta_h of one level with the data-domain elements pinned."""
    mesh = geometry.mesh
    pinned = np.flatnonzero(problem.omega.contains(mesh.centroids()))
    phi_h = interpolate_q(problem.levelset, mesh, problem.q)
    return build_deformation(geometry, phi_h, problem.q, pinned_elements=pinned)


def compute_errors(u, problem, geometry, deformation, space):
    """
    Relative L2 and H1-seminorm errors in B on the deformed geometry.

    Exact branches are evaluated at the mapped quadrature points and the indicator of B
    at the same points.

    Returns:
        (rel_l2_B, rel_h1semi_B)
    """
    sol = problem.solution
    err = np.zeros(2)
    ref = np.zeros(2)
    measure = 0.0
    for side in (NEG, POS):
        side_map = space.side_maps[side]
        for batch in volume_chunks(geometry, side, problem.order):
            mb = map_basis(deformation, batch, space.degree)
            chi = problem.target.contains(mb.points).astype(float)
            if not np.any(chi):
                continue
            w = mb.weights * chi
            c = u[side_map[mb.elements]]
            uh = np.einsum('eqn,en->eq', mb.values, c)
            guh = np.einsum('eqna,en->eqa', mb.grads, c)
            ue = sol.value(side, mb.points)
            gue = sol.gradient(side, mb.points)
            err += [np.sum(w * (ue - uh)**2), np.sum(w * np.sum((gue - guh)**2, axis=-1))]
            ref += [np.sum(w * ue**2), np.sum(w * np.sum(gue**2, axis=-1))]
            measure += w.sum()
    if measure <= 0:
        raise DataError("Target region B does not intersect the computational domain")
    rel = np.divide(np.sqrt(err), np.sqrt(ref), out=np.where(err > 0, np.inf, 0.0), where=ref > 0)
    return float(rel[0]), float(rel[1])


def deformed_area(geometry, deformation, side, order=8):
    """Area of the deformed subdomain on `side`."""
    total = 0.0
    for batch in volume_chunks(geometry, side, order):
        pf = deformation.push_forward(batch.elements, batch.xi)
        total += float(np.sum(batch.weights * pf.det))
    return total


@dataclass
class LevelResult:
    level: int
    h: float
    ndof: int
    rel_l2_B: float
    rel_h1semi_B: float
    tnorm_err: float
    dual_grad: float
    geom_probe: float
    runtime_s: float
    ndof_primal: int = 0
    ndof_dual: int = 0
    residual: float = 0.0
    failed_nodes: int = 0
    delta: float = 0.0
    stab_consistency: float = 0.0

    def row(self):
        return [getattr(self, name) for name in CSV_HEADER.split(',')]


def eoc(values):
    """log2(e_k / e_{k+1}) between consecutive entries."""
    values = np.asarray(values, dtype=float)
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.log2(values[:-1] / values[1:])


@dataclass
class ConvergenceReport:
    problem: str
    rows: list = field(default_factory=list)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def eoc(self, name):
        return eoc(self.column(name))

    def check(self):
        """h halves and ndof grows between consecutive rows."""
        h = self.column('h')
        ndof = self.column('ndof')
        return bool(np.allclose(h[:-1] / h[1:], 2.0) and np.all(np.diff(ndof) > 0))

    def write_csv(self, path):
        table = np.array([r.row() for r in self.rows], dtype=float).reshape(-1, 9)
        np.savetxt(path, table, delimiter=',', header=CSV_HEADER, comments='',
                   fmt=['%d', '%.12g', '%d'] + ['%.12g'] * 6)

    def write_eoc_table(self, path):
        """EOC of every error column between consecutive levels."""
        levels = self.column('level')[1:]
        cols = [levels] + [self.eoc(name) for name in ERROR_COLUMNS]
        table = np.column_stack(cols) if len(levels) else np.zeros((0, 1 + len(ERROR_COLUMNS)))
        np.savetxt(path, table, delimiter=',', header='level,' + ','.join(f'eoc_{c}' for c in ERROR_COLUMNS),
                   comments='', fmt=['%d'] + ['%.6f'] * len(ERROR_COLUMNS))

    def write_ndofs(self, path):
        table = np.column_stack([self.column('level'), self.column('ndof'),
                                 self.column('ndof_primal'), self.column('ndof_dual')]).reshape(-1, 4)
        np.savetxt(path, table, delimiter=',', header='level,ndof,ndof_primal,ndof_dual', comments='', fmt='%d')


def _ensure_dir(path):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)


def _sidecar(path, suffix):
    stem, ext = os.path.splitext(path)
    return f"{stem}_{suffix}{ext or '.csv'}"


def export_solution_vtk(path, mesh, geometry, space, u):
    """Vertex values of both sides (NaN where a side is inactive) with side labels per cell."""
    point_data = {}
    N = mesh.num_vertices
    for side, name in ((NEG, 'u_neg'), (POS, 'u_pos')):
        values = np.full(N, np.nan)
        active = space.side_maps[side][:, :3] >= 0
        vertices = mesh.elements[active.any(axis=1)]
        local = space.side_maps[side][active.any(axis=1), :3]
        values[vertices.ravel()] = u[local.ravel()]
        point_data[name] = values
    mesh.export_vtk(path, cell_data={'label': geometry.labels}, point_data=point_data)


def solve_level(problem, level, verbose=True, export=None, out_stem=None):
    """
    Run the full pipeline on one refinement level.

    Returns:
        (LevelResult, dict of level objects)
    """
    start = time.perf_counter()
    _log(verbose, f"Level {level}:")

    with stage('mesh', level):
        _log(verbose, "Step 1: Building mesh...")
        mesh = build_level_mesh(problem, level)
        h = mesh.h
        _log(verbose, f"    Elements: {mesh.num_elements}, h = {h:.4g}")

    with stage('geometry', level):
        _log(verbose, "Step 2: Cutting the mesh with the levelset...")
        levelset = problem.levelset
        geometry = build_cut_geometry(levelset, mesh)
        _log(verbose, f"    Cut elements: {len(geometry.cut_elements)}")

    with stage('deformation', level):
        _log(verbose, f"Step 3: Isoparametric deformation (q={problem.q})...")
        deformation = build_level_deformation(problem, geometry)
        probe = geometry_error_probe(deformation, levelset, geometry)
        _log(verbose, f"    Geometry probe: {probe:.3e} (failed nodes: {deformation.failed_nodes})")

    with stage('spaces', level):
        cut, dual = spaces = build_spaces(mesh, geometry, problem.p)
        _log(verbose, f"    Dofs: {cut.num_dofs} primal + {dual.num_dofs} dual")

    with stage('noise', level):
        data = build_exact_data(problem, geometry, deformation, cut)
        noise = problem.noise
        data = apply_noise(data, noise.delta_tilde, noise.theta, problem.p, h, noise.seed)

    with stage('assembly', level):
        _log(verbose, "Step 4: Assembling the saddle-point system...")
        system = assemble_system(problem, geometry, deformation, spaces, data)

    with stage('solve', level):
        _log(verbose, "Step 5: Solving...")
        solution = solve_sparse(system)
        _log(verbose, f"    Residual: {solution.residual:.3e}, fill: {solution.fill:.2f} ({solution.ordering})")

    with stage('errors', level):
        rel_l2, rel_h1 = compute_errors(solution.u, problem, geometry, deformation, cut)
        sol = problem.solution
        interpolant = nodal_interpolate((sol.branch(NEG), sol.branch(POS)), cut, deformation)
        diag = eval_diagnostics(system, solution.u, solution.z, u_ref=interpolant)
        consistency = eval_stab_consistency(problem, geometry, deformation, cut, system, interpolant)
        _log(verbose, f"    rel L2(B) = {rel_l2:.4e}, rel H1(B) = {rel_h1:.4e}")

    if export is not None and out_stem is not None:
        with stage('export', level):
            _ensure_dir(out_stem)
            if export.vtk:
                export_solution_vtk(f"{out_stem}_level{level}.vtk", mesh, geometry, cut, solution.u)
                geometry.export_vtk(f"{out_stem}_level{level}_cut.vtk")
            if export.matrix_market:
                export_matrix_market(system, f"{out_stem}_level{level}.mtx")
            if export.displacement_csv:
                write_displacement_csv(deformation, f"{out_stem}_level{level}_displacement.csv")

    result = LevelResult(level, h, cut.num_dofs + dual.num_dofs, rel_l2, rel_h1, diag['tnorm'],
                         diag['dual_grad'], probe, time.perf_counter() - start,
                         ndof_primal=cut.num_dofs, ndof_dual=dual.num_dofs,
                         residual=solution.residual, failed_nodes=deformation.failed_nodes,
                         delta=data.delta, stab_consistency=consistency)
    objects = {'mesh': mesh, 'geometry': geometry, 'deformation': deformation, 'spaces': spaces,
               'system': system, 'solution': solution, 'interpolant': interpolant, 'data': data}
    return result, objects


def run_convergence(config):
    """Solve levels 0..levels-1 and write the main CSV plus the EOC and ndof sidecars."""
    problem = config.build_problem()
    _log(config.verbose, f"Convergence study: {problem.name} (p={problem.p}, q={problem.q})")
    report = ConvergenceReport(problem.name)
    stem = os.path.splitext(config.out)[0] if config.out else None
    for level in range(config.levels):
        result, _ = solve_level(problem, level, config.verbose, config.export, stem)
        if config.deterministic:
            result.runtime_s = 0.0
        report.rows.append(result)

    if config.out:
        _ensure_dir(config.out)
        report.write_csv(config.out)
        report.write_eoc_table(_sidecar(config.out, 'eoc'))
        report.write_ndofs(_sidecar(config.out, 'ndofs'))
        _log(config.verbose, f"Results saved to {config.out}")
    return report


def _sweep_change(axis, value):
    """Problem overrides for one sweep value."""
    value = str(value)
    if axis == 'gammaIF':
        return {'stabilization': {'gamma_if': float(value)}}
    if axis == 'alpha2':
        return {'stabilization': {'alpha2': float(value)}}
    if axis == 'kappaMode':
        return {'stabilization': {'kappa_mode': value}}
    if axis == 'includeNc':
        flag = value.lower()
        if flag not in ('true', 'false', '1', '0'):
            raise ConfigurationError(f"includeNc expects true/false, got {value!r}")
        return {'stabilization': {'include_nc': flag in ('true', '1')}}
    if axis in ('wavenumber', 'contrast'):
        parts = value.split(':')
        if len(parts) != 2:
            raise ConfigurationError(f"{axis} values look like a:b, got {value!r}")
        key = 'wavenumbers' if axis == 'wavenumber' else 'mu'
        return {key: [float(parts[0]), float(parts[1])]}
    raise ConfigurationError(f"Unknown sweep axis {axis!r}")


def run_sweep(config, axis=None, values=None, level=None):
    """
    One solve per value of `axis` at a fixed level (default: second finest).

    Returns:
        list of (value, rel_l2_B, rel_h1semi_B)
    """
    sweep = config.sweep
    axis = axis or sweep.axis
    values = values if values is not None else sweep.values
    if level is None:
        level = sweep.level if sweep is not None and sweep.level is not None else max(config.levels - 2, 0)
    _log(config.verbose, f"Sweep over {axis} at level {level}: {list(values)}")

    rows = []
    for value in values:
        with stage('config', level):
            problem = config.build_problem(_sweep_change(axis, value))
        result, _ = solve_level(problem, level, config.verbose)
        rows.append((str(value), result.rel_l2_B, result.rel_h1semi_B))

    if config.out:
        _ensure_dir(config.out)
        with open(config.out, 'w') as fh:
            fh.write(SWEEP_HEADER + '\n')
            for value, l2, h1 in rows:
                fh.write(f"{value},{l2:.12g},{h1:.12g}\n")
        _log(config.verbose, f"Sweep saved to {config.out}")
    return rows


@dataclass
class GeometryReport:
    rows: list = field(default_factory=list)

    def column(self, name):
        idx = GEOMETRY_HEADER.split(',').index(name)
        return np.array([r[idx] for r in self.rows])

    def eoc(self, name):
        return eoc(self.column(name))

    def write_csv(self, path):
        table = np.array(self.rows, dtype=float).reshape(-1, 6)
        np.savetxt(path, table, delimiter=',', header=GEOMETRY_HEADER, comments='',
                   fmt=['%d'] + ['%.12g'] * 5)


def unit_ball_area(ell):
    """Area of {|x|^ell + |y|^ell <= 1}."""
    return 4.0 * gamma(1.0 + 1.0 / ell)**2 / gamma(1.0 + 2.0 / ell)


def run_geometry_study(levelset, domain, n0, levels, q, exact_area=None, out=None, verbose=True):
    """
    Interface probe, area error of the deformed inner subdomain, normal error and det DTheta_h
    deviation under refinement.
    `exact_area` defaults to the area of the unit ball of the levelset norm.
    """
    if exact_area is None:
        exact_area = unit_ball_area(levelset.ell or 2)
    report = GeometryReport()
    mesh = build_structured_mesh(domain, n0)
    for level in range(levels):
        if level:
            mesh = uniform_refine(mesh)
        with stage('geometry', level):
            geometry = build_cut_geometry(levelset, mesh)
            deformation = build_deformation(geometry, interpolate_q(levelset, mesh, q), q)
            probe = geometry_error_probe(deformation, levelset, geometry)
            area = deformed_area(geometry, deformation, NEG)
            normals = normal_error(deformation, levelset, geometry)
            det_dev = jacobian_deviation(deformation)
        report.rows.append((level, mesh.h, probe, abs(area - exact_area), normals, det_dev))
        _log(verbose, f"    level {level}: h = {mesh.h:.4g}, probe = {probe:.3e}, "
                      f"area error = {abs(area - exact_area):.3e}")
    if out:
        _ensure_dir(out)
        report.write_csv(out)
    return report


def run_study(config):
    """Dispatch on `config.study`."""
    if config.study == 'sweep':
        return run_sweep(config)
    if config.study == 'geometry':
        problem = config.build_problem()
        return run_geometry_study(problem.levelset, problem.domain, problem.n0, config.levels,
                                  problem.q, out=config.out, verbose=config.verbose)
    return run_convergence(config)
