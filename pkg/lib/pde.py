"""
Benchmark problems, analytic references and error metrics.

Right-hand sides are written against jets (see lib.network): dicts keyed by
derivative multi-index. They only use arithmetic, so the same expression is
evaluated on plain arrays, Var (reverse mode) and Dual (forward mode).

Problems:
- kdv      u_t = -u_xxx - 6 u u_x on (-20, 20), periodic, two-soliton exact solution
- heat     u_t = u_xx - 16 u^3 on (0, 1), u = 1 on the boundary, parametric u0
- advdiff  nonlinear advection-diffusion on the unit square, Neumann, parametric
- holes    advection-diffusion of a blob around two holes, FE embedding
- static   div(a grad u) = 1 on the unit square (no time dependence)
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd

from lib.embedding import (UNIT_SQUARE, BoundaryKind, DiscreteBasis, Interval, analytic_eigenpairs,
                           load_discrete, point_keys)
from lib.errors import ConfigurationError, FormatError, MetricError
from lib.fem import DEFAULT_HOLES
from lib.network import Wrapper, derivative_keys

logger = logging.getLogger(__name__)

PARAM_BOX = ((-0.5, 0.5), (-0.5, 0.5))

# KdV two-soliton constants
KDV_K1 = 1.0
KDV_K2 = np.sqrt(5.0)
KDV_ETA1 = 0.0
KDV_ETA2 = 10.73
KDV_A = ((KDV_K1 - KDV_K2) / (KDV_K1 + KDV_K2)) ** 2
KDV_DOMAIN = Interval(-20.0, 20.0)


@dataclass(frozen=True, eq=False)
class PdeProblem:
    """
    name, spatial dim, parameter count, derivative order the RHS needs,
    rhs(jets, x, params, t), u0_jets(x, params, max_order), final time T.
    """
    name: str
    dim: int
    param_dim: int
    order: int
    rhs: Callable
    u0_jets: Callable
    T: float
    param_box: tuple = ()
    bc: tuple = ()
    domain: object = None
    hom_dirichlet: bool = False
    lift: Optional[Callable] = None
    advection: Optional[Callable] = None
    normalization: str = 'pointwise'      # or 'initial'
    exact: Optional[Callable] = None      # exact(x, params, t) -> u
    make_basis: Optional[Callable] = None  # n_phi -> embedding basis
    velocity: object = None
    checkpoints: tuple = ()

    def u0(self, x, params=None):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        params = _params(params, len(x), self.param_dim)
        return np.asarray(self.u0_jets(x, params, 0)[()], dtype=float)

    def wrapper(self):
        return Wrapper(hom_dirichlet=self.hom_dirichlet, lift=self.lift)

    def train_free_wrapper(self, theta0):
        return self.wrapper().with_train_free(self.u0_jets, theta0)


def _params(params, n, param_dim):
    if params is None:
        return np.zeros((n, param_dim))
    params = np.asarray(params, dtype=float)
    if params.ndim == 1:
        params = np.broadcast_to(params, (n, params.shape[0]))
    return params


def _zero_jets(n, dim, max_order, value):
    jets = {key: np.zeros(n) for key in derivative_keys(dim, max_order)}
    jets[()] = np.full(n, value, dtype=float)
    return jets


def constant_lift(value):
    def lift(x, params, max_order):
        return _zero_jets(len(x), x.shape[1], max_order, value)
    return lift


# --------------------------------------------------------------------------
# KdV
# --------------------------------------------------------------------------

def _kdv_moments(x, t):
    """Softmax weights over the four exponentials of f and the x / t rates of each term"""
    x = np.asarray(x, dtype=float).reshape(-1)
    eta1 = KDV_K1 * x - KDV_K1 ** 3 * t + KDV_ETA1
    eta2 = KDV_K2 * x - KDV_K2 ** 3 * t + KDV_ETA2
    E = np.column_stack([np.zeros_like(x), eta1, eta2, eta1 + eta2 + np.log(KDV_A)])
    E = E - E.max(axis=1, keepdims=True)
    p = np.exp(E)
    p /= p.sum(axis=1, keepdims=True)
    c = np.array([0.0, KDV_K1, KDV_K2, KDV_K1 + KDV_K2])
    d = -np.array([0.0, KDV_K1 ** 3, KDV_K2 ** 3, KDV_K1 ** 3 + KDV_K2 ** 3])
    return p, c, d


def kdv_exact_jets(x, t, max_order=0):
    """
    u = 2 d2/dx2 log f and its x-derivatives in closed form.

    d^n/dx^n log f is the n-th cumulant of the rate c under the softmax
    weights of the exponentials of f, which keeps every term bounded.
    """
    p, c, _ = _kdv_moments(x, t)
    mu = p @ c
    dc = c[None, :] - mu[:, None]
    m = {r: np.sum(p * dc ** r, axis=1) for r in (2, 3, 4, 5)}
    cumulants = [m[2], m[3], m[4] - 3 * m[2] ** 2, m[5] - 10 * m[3] * m[2]]
    keys = [(), (0,), (0, 0), (0, 0, 0)]
    return {keys[i]: 2.0 * cumulants[i] for i in range(max_order + 1)}


def kdv_exact(x, t):
    """Two-soliton solution at points x and time t"""
    return kdv_exact_jets(x, t, 0)[()]


def kdv_exact_dt(x, t):
    """du/dt of the two-soliton solution"""
    p, c, d = _kdv_moments(x, t)
    mu, nu = p @ c, p @ d
    return 2.0 * np.sum(p * (c[None, :] - mu[:, None]) ** 2 * (d[None, :] - nu[:, None]), axis=1)


def kdv_mass(t, a=-20.0, b=20.0):
    """Integral of u over [a, b]: 2 (d/dx log f)(b) - 2 (d/dx log f)(a)"""
    p, c, _ = _kdv_moments(np.array([a, b]), t)
    mu = p @ c
    return float(2.0 * (mu[1] - mu[0]))


def kdv_rhs(jets, x, params, t):
    u, ux, uxxx = jets[()], jets[(0,)], jets[(0, 0, 0)]
    return -uxxx - 6.0 * u * ux


def kdv_problem():
    def u0_jets(x, params, max_order):
        return kdv_exact_jets(x[:, 0], 0.0, max_order)

    return PdeProblem(
        name='kdv', dim=1, param_dim=0, order=3, rhs=kdv_rhs, u0_jets=u0_jets, T=3.0,
        bc=(BoundaryKind.PERIODIC, BoundaryKind.PERIODIC), domain=KDV_DOMAIN,
        exact=lambda x, params, t: kdv_exact(np.asarray(x).reshape(-1), t),
        make_basis=lambda n_phi: analytic_eigenpairs(KDV_DOMAIN, BoundaryKind.PERIODIC, n_phi),
        checkpoints=(0.5, 1.0, 1.5, 2.0, 2.5),
    )


# --------------------------------------------------------------------------
# Heat equation with cubic reaction
# --------------------------------------------------------------------------

def heat_rhs(jets, x, params, t):
    u = jets[()]
    return jets[(0, 0)] - 16.0 * u * u * u


def heat_u0_jets(x, params, max_order):
    x = x[:, 0]
    a1, a2 = params[:, 0], params[:, 1]
    s1, s3 = np.sin(np.pi * x), np.sin(3 * np.pi * x)
    jets = {(): 1.0 + a1 * s1 + a2 * s3}
    if max_order >= 1:
        jets[(0,)] = np.pi * (a1 * np.cos(np.pi * x) + 3 * a2 * np.cos(3 * np.pi * x))
    if max_order >= 2:
        jets[(0, 0)] = -np.pi ** 2 * (a1 * s1 + 9 * a2 * s3)
    return jets


def heat_problem():
    domain = Interval(0.0, 1.0)
    return PdeProblem(
        name='heat', dim=1, param_dim=2, order=2, rhs=heat_rhs, u0_jets=heat_u0_jets, T=0.1,
        param_box=PARAM_BOX, bc=(BoundaryKind.DIRICHLET, BoundaryKind.DIRICHLET), domain=domain,
        hom_dirichlet=True, lift=constant_lift(1.0),
        make_basis=lambda n_phi: analytic_eigenpairs(domain, BoundaryKind.DIRICHLET, n_phi),
        checkpoints=(0.002, 0.005, 0.02, 0.04),
    )


# --------------------------------------------------------------------------
# Nonlinear advection-diffusion on the unit square
# --------------------------------------------------------------------------

def advdiff_advection(jets, x, params, t):
    u = jets[()]
    a2 = params[:, 1]
    return 4.0 * (np.cos(np.pi * a2) * u * jets[(0,)] + np.sin(np.pi * a2) * u * jets[(1,)])


def advdiff_rhs(jets, x, params, t):
    a1 = params[:, 0]
    kappa = 1.0 + a1 * np.sin(2 * np.pi * x[:, 0])
    dkappa = 2 * np.pi * a1 * np.cos(2 * np.pi * x[:, 0])
    lap = jets[(0, 0)] + jets[(1, 1)]
    return 0.1 * (kappa * lap + dkappa * jets[(0,)]) + advdiff_advection(jets, x, params, t)


def advdiff_u0_jets(x, params, max_order):
    S = [np.sin(np.pi * x[:, i]) ** 2 for i in range(2)]
    dS = [np.pi * np.sin(2 * np.pi * x[:, i]) for i in range(2)]
    d2S = [2 * np.pi ** 2 * np.cos(2 * np.pi * x[:, i]) for i in range(2)]
    jets = {(): S[0] * S[1]}
    if max_order >= 1:
        jets[(0,)] = dS[0] * S[1]
        jets[(1,)] = S[0] * dS[1]
    if max_order >= 2:
        jets[(0, 0)] = d2S[0] * S[1]
        jets[(0, 1)] = dS[0] * dS[1]
        jets[(1, 1)] = S[0] * d2S[1]
    return jets


def advdiff_problem():
    return PdeProblem(
        name='advdiff', dim=2, param_dim=2, order=2, rhs=advdiff_rhs, u0_jets=advdiff_u0_jets, T=0.1,
        param_box=PARAM_BOX, bc=(BoundaryKind.NEUMANN,) * 4, domain=UNIT_SQUARE,
        advection=advdiff_advection,
        make_basis=lambda n_phi: analytic_eigenpairs(UNIT_SQUARE, BoundaryKind.NEUMANN, n_phi),
        checkpoints=(0.02, 0.04, 0.06, 0.08),
    )


# --------------------------------------------------------------------------
# Domain with holes
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class VelocityField:
    """Analytic closure w(x) or a table (points, values) looked up exactly"""
    func: Optional[Callable] = None
    points: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    _index: dict = field(default_factory=dict, repr=False)
    _memo: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.points is not None:
            for row, key in enumerate(point_keys(self.points)):
                self._index.setdefault(key, row)

    @classmethod
    def tabulate(cls, points, func):
        points = np.asarray(points, dtype=float)
        return cls(points=points, values=np.asarray(func(points), dtype=float))

    @classmethod
    def from_csv(cls, path):
        try:
            df = pd.read_csv(path, float_precision='round_trip')
        except FileNotFoundError:
            raise ConfigurationError(f"velocity file not found: {path}")
        missing = [c for c in ('x', 'y', 'wx', 'wy') if c not in df.columns]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}", field=missing[0])
        return cls(points=df[['x', 'y']].to_numpy(float), values=df[['wx', 'wy']].to_numpy(float))

    def to_csv(self, path):
        pd.DataFrame({'x': self.points[:, 0], 'y': self.points[:, 1],
                      'wx': self.values[:, 0], 'wy': self.values[:, 1]}).to_csv(path, index=False)

    def at(self, x):
        if self.func is not None:
            return np.asarray(self.func(x), dtype=float)
        hit = self._memo.get('last')
        if hit is not None and hit[0] is x:
            return hit[1]
        rows = np.empty(len(x), dtype=np.int64)
        for i, key in enumerate(point_keys(x)):
            row = self._index.get(key)
            if row is None:
                raise ConfigurationError(f"velocity is not tabulated at {np.asarray(x)[i].tolist()}")
            rows[i] = row
        w = self.values[rows]
        self._memo['last'] = (x, w)
        return w


def cylinder_flow_velocity(x, cylinders=DEFAULT_HOLES, U=1.0):
    """
    Potential flow with far-field velocity (0, -U) past circular cylinders.

    Superposes one doublet per cylinder: u - i v = i U (1 + sum R^2 / (z - c)^2).
    An approximation of the viscous flow around the holes (walls are ignored).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = x[:, 0] + 1j * x[:, 1]
    W = np.full(len(z), 1j * U, dtype=complex)
    for cx, cy, r in cylinders:
        W += 1j * U * r ** 2 / (z - (cx + 1j * cy)) ** 2
    return np.column_stack([W.real, -W.imag])


def holes_u0_jets(x, params, max_order):
    a = np.zeros((len(x), 2)) if params.shape[1] == 0 else params
    c = np.column_stack([0.35 + 0.1 * a[:, 0], 0.7 + 0.1 * a[:, 1]])
    dx = x - c
    q = 100.0 * np.sum(dx * dx, axis=1)
    T = np.tanh(q)
    F = 1.0 / np.cosh(q) ** 2
    jets = {(): F}
    if max_order >= 1:
        F1 = -2.0 * T * F
        for l in range(2):
            jets[(l,)] = F1 * 200.0 * dx[:, l]
    if max_order >= 2:
        F2 = 4.0 * F * T * T - 2.0 * F * F
        for l in range(2):
            for k in range(l, 2):
                jets[(l, k)] = F2 * 200.0 * dx[:, l] * 200.0 * dx[:, k] + (F1 * 200.0 if l == k else 0.0)
    return jets


def holes_problem(embedding_file=None, velocity_file=None, alpha_box=PARAM_BOX, basis=None, diffusion=0.001,
                  velocity=None):
    """
    Blob of concentration advected around two holes

    Args:
        embedding_file / basis: FE eigenbasis (Dirichlet top, Neumann elsewhere)
        velocity_file: CSV x,y,wx,wy on the same point set; None uses the potential-flow surrogate
        alpha_box: parameter box, or None for the non-parametric case
    """
    if basis is None:
        if embedding_file is None:
            raise ConfigurationError("holes problem needs an embedding file")
        basis = load_discrete(embedding_file)
    if velocity is None:
        if velocity_file is not None:
            velocity = VelocityField.from_csv(velocity_file)
            _check_same_points(basis.points, velocity.points, velocity_file)
        else:
            velocity = VelocityField.tabulate(basis.points, cylinder_flow_velocity)

    def advection(jets, x, params, t):
        w = velocity.at(x)
        return w[:, 0] * jets[(0,)] + w[:, 1] * jets[(1,)]

    def rhs(jets, x, params, t):
        adv = advection(jets, x, params, t)
        if diffusion == 0:
            return adv
        return diffusion * (jets[(0, 0)] + jets[(1, 1)]) + adv

    box = tuple(alpha_box) if alpha_box is not None else ()
    return PdeProblem(
        name='holes' if not box else 'holes-param', dim=2, param_dim=len(box), order=2, rhs=rhs,
        u0_jets=holes_u0_jets, T=0.6, param_box=box, bc=('dirichlet:top', 'neumann:walls,holes'),
        hom_dirichlet=True, advection=advection, normalization='initial',
        make_basis=lambda n_phi: basis if n_phi >= basis.n_phi else _truncate(basis, n_phi),
        velocity=velocity, checkpoints=(0.1, 0.2, 0.3, 0.4, 0.5),
    )


def _truncate(basis, n_phi):
    return DiscreteBasis(basis.points, basis.values[:, :n_phi], basis.grads[:, :n_phi],
                         basis.hessians[:, :n_phi], basis.eigenvalues[:n_phi], dict(basis.manifest))


def _check_same_points(a, b, path):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError(f"{path}: {len(b)} velocity points vs {len(a)} embedding points")
    key = lambda pts: sorted(map(bytes, np.ascontiguousarray(pts, dtype='<f8')))
    if key(a) != key(b):
        raise ConfigurationError(f"{path}: velocity points differ from the embedding point set")


# --------------------------------------------------------------------------
# Static problem
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StaticProblem:
    """div(a grad u) = source on the unit square, homogeneous Dirichlet"""
    name: str = 'static'
    dim: int = 2
    order: int = 2
    domain: object = UNIT_SQUARE
    source: float = 1.0

    @staticmethod
    def coefficient(x):
        a = np.exp(-(x[:, 0] - 0.25) ** 2 - (x[:, 1] - 0.25) ** 2)
        grad = np.column_stack([-2 * (x[:, 0] - 0.25) * a, -2 * (x[:, 1] - 0.25) * a])
        return a, grad

    def residual(self, jets, x):
        a, ga = self.coefficient(x)
        return a * (jets[(0, 0)] + jets[(1, 1)]) + ga[:, 0] * jets[(0,)] + ga[:, 1] * jets[(1,)] - self.source


def static_problem():
    return StaticProblem()


def embedding_projection_error(phi, u):
    """||Phi Phi^+ u - u||_2: how far u is from the span of the embedding"""
    phi = np.asarray(phi, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1)
    coef, *_ = np.linalg.lstsq(phi, u, rcond=None)
    return float(np.linalg.norm(phi @ coef - u))


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------

@dataclass
class ErrorReport:
    times: np.ndarray
    errors: np.ndarray        # (n_times, n_params) relative L2 error per parameter
    mean_error: np.ndarray    # (n_times,)
    deviation: np.ndarray     # (n_times,) mean solution deviation of the reference

    def to_frame(self):
        return pd.DataFrame({'t': self.times, 'eps': self.mean_error, 'delta': self.deviation})


def relative_l2_error(u, ref, norm=None):
    """||u - ref|| / ||ref|| (or / norm when given)"""
    u = np.asarray(u, dtype=float)
    ref = np.asarray(ref, dtype=float)
    den = np.linalg.norm(ref) if norm is None else norm
    if den == 0:
        raise MetricError("relative error undefined: reference has zero norm")
    return float(np.linalg.norm(u - ref) / den)


def mean_solution_deviation(ref):
    """mean_i ||u_i - mu|| / ||mu|| over the parameter axis (axis 0) of ref"""
    ref = np.asarray(ref, dtype=float)
    mu = ref.mean(axis=0)
    den = np.linalg.norm(mu)
    if den == 0:
        raise MetricError("mean solution deviation undefined: mean solution has zero norm")
    return float(np.mean(np.linalg.norm(ref - mu, axis=1)) / den)


def metrics(nn_solution, reference, times=None, normalization='pointwise'):
    """
    Error report for solutions sampled at common (time, parameter, point) triples

    Args:
        nn_solution, reference: arrays (n_times, n_params, n_points)
        normalization: 'pointwise' divides by ||ref(t)||, 'initial' by ||ref(t=0)|| per parameter
    """
    nn = np.asarray(nn_solution, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if nn.ndim == 2:
        nn, ref = nn[:, None, :], ref[:, None, :]
    if nn.shape != ref.shape:
        raise MetricError(f"solution shapes differ: {nn.shape} vs {ref.shape}")
    n_t, n_p, _ = ref.shape
    errors = np.empty((n_t, n_p))
    for i in range(n_t):
        for k in range(n_p):
            norm = np.linalg.norm(ref[0, k]) if normalization == 'initial' else None
            errors[i, k] = relative_l2_error(nn[i, k], ref[i, k], norm)
    deviation = np.array([mean_solution_deviation(ref[i]) if n_p > 1 else 0.0 for i in range(n_t)])
    times = np.arange(n_t, dtype=float) if times is None else np.asarray(times, dtype=float)
    return ErrorReport(times, errors, errors.mean(axis=1), deviation)


def param_grid(box, n=11):
    """Tensor grid with n points per parameter (11 x 11 = 121 points for two parameters)"""
    if not box:
        return np.zeros((1, 0))
    axes = [np.linspace(lo, hi, n) for lo, hi in box]
    mesh = np.meshgrid(*axes, indexing='ij')
    return np.column_stack([m.ravel() for m in mesh])


# --------------------------------------------------------------------------
# Solution tables
# --------------------------------------------------------------------------

def solution_frame(times, x, alphas, values):
    """Long table t, x[, y], alpha1, alpha2, u from values of shape (n_times, n_params, n_points)"""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    alphas = np.asarray(alphas, dtype=float).reshape(len(alphas), -1)
    values = np.asarray(values, dtype=float)
    n_t, n_p, n_x = values.shape
    cols = {'t': np.repeat(times, n_p * n_x)}
    names = ['x', 'y'][:x.shape[1]]
    for i, name in enumerate(names):
        cols[name] = np.tile(x[:, i], n_t * n_p)
    for j in range(alphas.shape[1]):
        cols[f"alpha{j + 1}"] = np.tile(np.repeat(alphas[:, j], n_x), n_t)
    cols['u'] = values.reshape(-1)
    return pd.DataFrame(cols)


def frame_to_array(df, times, alphas, x):
    """Inverse of solution_frame: pick (n_times, n_params, n_points) values out of a table"""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    alphas = np.asarray(alphas, dtype=float).reshape(len(alphas), -1)
    space_cols = ['x', 'y'][:x.shape[1]]
    alpha_cols = [f"alpha{j + 1}" for j in range(alphas.shape[1])]
    missing = [c for c in ['t'] + space_cols + alpha_cols + ['u'] if c not in df.columns]
    if missing:
        raise FormatError(f"reference table lacks columns {missing}", field=missing[0])
    keys = ['t'] + space_cols + alpha_cols
    table = df.copy()
    table[keys] = table[keys].round(10)
    lookup = table.set_index(keys)['u']
    out = np.empty((len(times), len(alphas), len(x)))
    for i, t in enumerate(times):
        for k, a in enumerate(alphas):
            idx = pd.MultiIndex.from_arrays(
                [np.full(len(x), round(float(t), 10))] +
                [np.round(x[:, j], 10) for j in range(x.shape[1])] +
                [np.full(len(x), round(float(a[j]), 10)) for j in range(alphas.shape[1])], names=keys)
            try:
                out[i, k] = lookup.loc[idx].to_numpy()
            except KeyError:
                raise FormatError(f"reference table has no values at t={t}, alpha={a.tolist()}", field='u')
    return out


PROBLEMS = {
    'kdv': kdv_problem,
    'heat': heat_problem,
    'advdiff': advdiff_problem,
}
