from dataclasses import dataclass, field, fields, replace

import numpy as np
import sympy

from src.cutgeom import LevelSet
from src.errors import ConfigurationError, DomainError
from src.fespace import NEG, POS, SUPPORTED_DEGREES
from src.mesh import Box

X, Y = sympy.symbols('x y', real=True)
OMEGA_MARGIN = 0.04
KAPPA_MODES = ('harmonic', 'average')
# weights for the catalog benchmarks; explicit `stabilization` overrides win
BENCHMARK_STAB = dict(gamma_gls=1e-5, gamma_cip=1e-5, gamma_if=1.0, alpha1=1e-4, alpha2=1e-4)


@dataclass(frozen=True)
class Region:
    """Rectangle with an optional rectangular hole."""
    outer: Box
    hole: Box = None

    def contains(self, points):
        inside = self.outer.contains(points)
        if self.hole is not None:
            inside &= ~self.hole.contains(points, tol=-1e-12)
        return inside

    @property
    def area(self):
        return self.outer.area - (0.0 if self.hole is None else self.hole.area)

    def boxes(self):
        return [b for b in (self.outer, self.hole) if b is not None]

    def sample_points(self):
        """Corners and edge midpoints of every boundary rectangle."""
        pts = []
        for box in self.boxes():
            c = box.corners()
            pts.append(c)
            pts.append(0.5 * (c + np.roll(c, -1, axis=0)))
        return np.vstack(pts)


@dataclass(frozen=True)
class StabParams:
    gamma_gls: float = 1.0
    gamma_cip: float = 1.0
    gamma_if: float = 1.0
    alpha1: float = 1e-3
    alpha2: float = 1e-2
    include_nc: bool = True
    kappa_mode: str = 'harmonic'

    def __post_init__(self):
        for name in ('gamma_gls', 'gamma_cip', 'gamma_if', 'alpha2'):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")
        if not (np.isfinite(self.alpha1) and self.alpha1 > 0):
            raise ConfigurationError(f"alpha1 must be > 0, got {self.alpha1}")
        if self.kappa_mode not in KAPPA_MODES:
            raise ConfigurationError(f"kappa_mode must be one of {KAPPA_MODES}, got {self.kappa_mode!r}")

    def kappa(self, mu):
        """Convex Nitsche weights (kappa_1, kappa_2)."""
        if self.kappa_mode == 'average':
            return 0.5, 0.5
        k1 = mu[1] / (mu[0] + mu[1])
        return k1, 1.0 - k1


@dataclass(frozen=True)
class NoiseParams:
    delta_tilde: float = 0.0
    theta: int = 0
    seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.delta_tilde) and self.delta_tilde >= 0):
            raise ConfigurationError(f"delta_tilde must be >= 0, got {self.delta_tilde}")

    def delta(self, h, p):
        return self.delta_tilde * h ** (p - self.theta)


def _vectorize(expr):
    func = sympy.lambdify((X, Y), expr, modules='numpy')

    def evaluate(points):
        points = np.asarray(points, dtype=float)
        x, y = points[..., 0], points[..., 1]
        return np.broadcast_to(np.asarray(func(x, y), dtype=float), x.shape).copy()

    return evaluate


class ManufacturedSolution:
    """
    Closed-form piecewise solution with per-side value, gradient and source evaluators.

    Each branch is a sympy expression in (x, y) defined on the whole plane (or away from
    its singular set); gradients and the source f_i = -mu_i Lap u_i - rho_i u_i are
    derived symbolically and lambdified.
    """
    def __init__(self, branches, mu, rho, name='custom', singular=(None, None)):
        self.name = name
        self.mu = tuple(float(m) for m in mu)
        self.rho = tuple(float(r) for r in rho)
        self.expressions = tuple(sympy.sympify(b) for b in branches)
        self._singular = singular
        self._value, self._grad, self._source = [], [], []
        for side, u in enumerate(self.expressions):
            ux, uy = sympy.diff(u, X), sympy.diff(u, Y)
            lap = sympy.diff(u, X, 2) + sympy.diff(u, Y, 2)
            f = -self.mu[side] * lap - self.rho[side] * u
            self._value.append(_vectorize(u))
            self._grad.append((_vectorize(ux), _vectorize(uy)))
            self._source.append(_vectorize(f))

    def __repr__(self):
        return f"ManufacturedSolution({self.name}, mu={self.mu}, rho={self.rho})"

    def _check(self, side, points):
        test = self._singular[side]
        if test is not None and np.any(test(np.asarray(points, dtype=float))):
            raise DomainError(f"{self.name}: side {side} formula is singular at a requested point")

    def value(self, side, points):
        return self._value[side](points)

    def gradient(self, side, points):
        self._check(side, points)
        gx, gy = self._grad[side]
        return np.stack([gx(points), gy(points)], axis=-1)

    def source(self, side, points):
        self._check(side, points)
        return self._source[side](points)

    def branch(self, side):
        return lambda points: self.value(side, points)

    def source_branch(self, side):
        return lambda points: self.source(side, points)

    @classmethod
    def diffusion(cls, mu, ell=4, rho=(0.0, 0.0)):
        """
        u_1 = (1 + pi mu_1/mu_2)/sqrt(2) - cos(pi s/4), u_2 = mu_1 pi/(mu_2 sqrt(2)) s^(1/4)
        with s = x^ell + y^ell; continuous with continuous flux across s = 1.
        """
        mu1, mu2 = sympy.nsimplify(mu[0]), sympy.nsimplify(mu[1])
        s = X**ell + Y**ell
        u1 = (1 + sympy.pi * mu1 / mu2) / sympy.sqrt(2) - sympy.cos(sympy.pi * s / 4)
        u2 = mu1 * sympy.pi / (mu2 * sympy.sqrt(2)) * s**sympy.Rational(1, 4)

        def at_origin(points):
            return np.sum(np.abs(points)**ell, axis=-1) <= 1e-300

        return cls((u1, u2), mu, rho, name=f'diffusion-l{ell}', singular=(None, at_origin))

    @classmethod
    def helmholtz(cls, mu, k, ell=4):
        """u_1 = C_1 cos(k_1 s) + C_2, u_2 = sin(k_2 s), s = x^ell + y^ell, rho_i = k_i^2."""
        k1, k2 = float(k[0]), float(k[1])
        if np.isclose(np.sin(k1), 0.0):
            raise ConfigurationError(f"sin(k1) vanishes for k1={k1}")
        C1 = -(k2 * mu[1]) / (k1 * mu[0]) * np.cos(k2) / np.sin(k1)
        C2 = np.sin(k2) - C1 * np.cos(k1)
        s = X**ell + Y**ell
        u1 = C1 * sympy.cos(k1 * s) + C2
        u2 = sympy.sin(k2 * s)
        sol = cls((u1, u2), mu, (k1**2, k2**2), name=f'helmholtz-l{ell}')
        sol.constants = (C1, C2)
        return sol


def eval_exact_solution(solution, side, points, gradient=False):
    if gradient:
        return solution.gradient(side, points)
    return solution.value(side, points)


def eval_source_term(solution, side, points):
    return solution.source(side, points)


@dataclass(frozen=True)
class ProblemSpec:
    """
    One benchmark configuration. `omega` is the data domain, `target` the region B
    where errors are measured; both are subsets of the rectangle `domain`.
    """
    name: str
    mu: tuple
    rho: tuple
    ell: int
    domain: Box
    omega: Region
    target: Region
    solution: ManufacturedSolution = field(compare=False, repr=False)
    wavenumbers: tuple = None
    stab: StabParams = StabParams()
    noise: NoiseParams = NoiseParams()
    p: int = 1
    q: int = 1
    n0: int = 12
    quad_order: int = None

    def __post_init__(self):
        if self.p not in SUPPORTED_DEGREES:
            raise ConfigurationError(f"p={self.p} not in {SUPPORTED_DEGREES}")
        if not 1 <= self.q <= self.p:
            raise ConfigurationError(f"Need 1 <= q <= p, got q={self.q}, p={self.p}")
        if min(self.mu) <= 0:
            raise ConfigurationError(f"Diffusion coefficients must be positive, got {self.mu}")
        if self.ell < 2 or self.ell % 2:
            raise ConfigurationError(f"Levelset exponent must be even and >= 2, got {self.ell}")
        _ = self.omega_side

    @property
    def levelset(self):
        return LevelSet.norm_ball(self.ell)

    @property
    def order(self):
        return self.quad_order or 2 * self.p + 2

    @property
    def kappa(self):
        return self.stab.kappa(self.mu)

    @property
    def omega_side(self):
        """Side containing omega, checked at its corners and edge midpoints."""
        phi = self.levelset(self.omega.sample_points())
        if np.all(phi <= -OMEGA_MARGIN):
            return NEG
        if np.all(phi >= OMEGA_MARGIN):
            return POS
        raise ConfigurationError(
            f"omega is not inside one subdomain with margin {OMEGA_MARGIN} "
            f"(levelset range [{phi.min():.4f}, {phi.max():.4f}])")

    def align_boxes(self):
        return self.omega.boxes()


def _diffusion_l4(mu=(2.0, 2.0), rho=(0.0, 0.0)):
    return dict(name='diffusion-l4', mu=mu, rho=rho, ell=4,
                domain=Box.square(-1.5, 1.5),
                omega=Region(Box.square(-0.5, 0.5)),
                target=Region(Box.square(-1.25, 1.25)),
                n0=12)


def _helmholtz_box(mu=(2.0, 2.0), k=(3.0, 1.0)):
    return dict(name='helmholtz-l4-box', mu=mu, ell=4, wavenumbers=k,
                domain=Box.square(-1.6, 1.6),
                omega=Region(Box.square(-0.8, 0.8)),
                target=Region(Box(-1.1, 1.1, -1.0, 1.0)),
                n0=8)


def _helmholtz_convex(mu=(1.0, 2.0), k=(16.0, 2.0)):
    return dict(name='helmholtz-l4-convex', mu=mu, ell=4, wavenumbers=k,
                domain=Box.square(-1.5, 1.5),
                omega=Region(Box(-1.5, 1.5, -1.5, 1.25), Box.square(-1.25, 1.25)),
                target=Region(Box.square(-1.5, 1.5), Box(-1.5, 1.5, 1.25, 1.5)),
                n0=24)


def _circle_l2(mu=(2.0, 2.0), rho=(0.0, 0.0)):
    return dict(name='circle-l2', mu=mu, rho=rho, ell=2,
                domain=Box.square(-1.5, 1.5),
                omega=Region(Box.square(-0.5, 0.5)),
                target=Region(Box.square(-1.25, 1.25)),
                n0=12)


CATALOG = {
    'diffusion-l4': _diffusion_l4,
    'helmholtz-l4-box': _helmholtz_box,
    'helmholtz-l4-convex': _helmholtz_convex,
    'circle-l2': _circle_l2,
}

OVERRIDE_KEYS = ('mu', 'rho', 'wavenumbers', 'p', 'q', 'n0', 'quad_order', 'stabilization', 'noise')


def make_problem(catalog_id, overrides=None):
    """
    Build a benchmark ProblemSpec from the catalog.

    Args:
        catalog_id: one of CATALOG.
        overrides: optional dict with keys from OVERRIDE_KEYS; `stabilization` and
            `noise` are dicts of StabParams / NoiseParams fields. Stabilization
            fields not given fall back to BENCHMARK_STAB, not the StabParams defaults.

    Returns:
        ProblemSpec
    """
    if catalog_id not in CATALOG:
        raise ConfigurationError(f"Unknown problem {catalog_id!r}; choose from {sorted(CATALOG)}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(OVERRIDE_KEYS)
    if unknown:
        raise ConfigurationError(f"Unknown override keys {sorted(unknown)}")

    builder = CATALOG[catalog_id]
    kwargs = {}
    if 'mu' in overrides:
        kwargs['mu'] = tuple(float(m) for m in overrides.pop('mu'))
        if len(kwargs['mu']) != 2 or not all(np.isfinite(m) and m > 0 for m in kwargs['mu']):
            raise ConfigurationError(f"mu must be two positive numbers, got {kwargs['mu']}")
    if 'wavenumbers' in overrides:
        if catalog_id.startswith('helmholtz'):
            kwargs['k'] = tuple(float(k) for k in overrides.pop('wavenumbers'))
        else:
            raise ConfigurationError(f"{catalog_id} has no wavenumbers")
    if 'rho' in overrides:
        if catalog_id.startswith('helmholtz'):
            raise ConfigurationError("Helmholtz problems set rho through `wavenumbers`")
        kwargs['rho'] = tuple(float(r) for r in overrides.pop('rho'))
    base = builder(**kwargs)

    if base.get('wavenumbers') is not None:
        k = base['wavenumbers']
        base['rho'] = (k[0]**2, k[1]**2)
        base['solution'] = ManufacturedSolution.helmholtz(base['mu'], k, base['ell'])
    else:
        base['solution'] = ManufacturedSolution.diffusion(base['mu'], base['ell'], base['rho'])

    stab = _dataclass_from(StabParams, {**BENCHMARK_STAB, **overrides.pop('stabilization', {})})
    noise = _dataclass_from(NoiseParams, overrides.pop('noise', {}))
    return ProblemSpec(stab=stab, noise=noise, **base, **overrides)


def _dataclass_from(cls, values):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"Unknown {cls.__name__} keys {sorted(unknown)}")
    return cls(**values)


def with_stab(problem, **changes):
    return replace(problem, stab=replace(problem.stab, **changes))
