"""
Reference solvers for the benchmark problems.

Finite differences on tensor grids (second order in space) with implicit
Euler + Newton in time for the interval and unit-square problems, and a P1
finite-element solver for the domain with holes.

The Newton Jacobian is assembled from the problem's own jet RHS: the RHS is
pointwise in the jets, so its linearization is sum_k diag(c_k) D_k where c_k
is the forward-mode derivative with respect to jet k and D_k the FD operator
producing that jet.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve
from tqdm import tqdm

from lib.autodiff import Dual, tangent_of, value_of
from lib.embedding import BoundaryKind, Interval, Rectangle
from lib.errors import ConfigurationError, SolverError
from lib.fem import advection_matrix, as_space, assemble_full, nodal_to_dofs
from lib.pde import solution_frame

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITERS = 25


@dataclass
class ReferenceSolution:
    times: np.ndarray
    params: np.ndarray        # (n_params, param_dim)
    x: np.ndarray             # (n_points, dim)
    values: np.ndarray        # (n_times, n_params, n_points)

    def to_frame(self):
        return solution_frame(self.times, self.x, self.params, self.values)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


# --------------------------------------------------------------------------
# 1D finite-difference operators on the nodes 0..n
# --------------------------------------------------------------------------

def _fd_1d(n, h, kind):
    """Node coordinates offsets and (D1, D2, D3) for one axis"""
    if kind == BoundaryKind.PERIODIC:
        m = n                                     # last node coincides with the first
        rows = np.arange(m)
        off = lambda k: sparse.csr_matrix((np.ones(m), (rows, (rows + k) % m)), shape=(m, m))
        I = sparse.identity(m)
        D1 = (off(1) - off(-1)) / (2 * h)
        D2 = (off(1) - 2 * I + off(-1)) / h ** 2
        D3 = (off(2) - 2 * off(1) + 2 * off(-1) - off(-2)) / (2 * h ** 3)
        return D1.tocsr(), D2.tocsr(), D3.tocsr()

    m = n + 1
    D1 = (sparse.diags([-np.ones(m - 1), np.ones(m - 1)], [-1, 1]) / (2 * h)).tolil()
    D2 = (sparse.diags([np.ones(m - 1), -2 * np.ones(m), np.ones(m - 1)], [-1, 0, 1]) / h ** 2).tolil()
    for row, inner in ((0, 1), (m - 1, m - 2)):
        D1[row, :] = 0.0
        D2[row, :] = 0.0
        if kind == BoundaryKind.NEUMANN:
            # mirrored ghost node: u_{-1} = u_1
            D2[row, row] = -2.0 / h ** 2
            D2[row, inner] = 2.0 / h ** 2
    return D1.tocsr(), D2.tocsr(), None


def _uniform_kind(problem):
    kinds = {BoundaryKind(b) for b in problem.bc}
    if len(kinds) != 1:
        raise ConfigurationError(f"{problem.name}: FD reference needs one boundary kind on all sides, got {kinds}")
    return kinds.pop()


@dataclass
class FdGrid:
    x: np.ndarray                 # (n_points, dim)
    ops: dict                     # jet key -> sparse operator
    fixed: np.ndarray             # Dirichlet node indices


def fd_grid(domain, nx, kind, max_order=2):
    """Tensor FD grid with operators for every jet key up to max_order"""
    if isinstance(domain, Interval):
        h = domain.lengths[0] / nx
        D1, D2, D3 = _fd_1d(nx, h, kind)
        m = D2.shape[0]
        x = (domain.a + h * np.arange(m))[:, None]
        ops = {(): sparse.identity(m, format='csr'), (0,): D1, (0, 0): D2}
        if max_order >= 3:
            if D3 is None:
                raise ConfigurationError("third derivatives need a periodic grid")
            ops[(0, 0, 0)] = D3
        fixed = np.array([0, m - 1]) if kind == BoundaryKind.DIRICHLET else np.array([], dtype=np.int64)
        return FdGrid(x, ops, fixed)

    if not isinstance(domain, Rectangle):
        raise ConfigurationError(f"FD reference needs an interval or rectangle, got {type(domain).__name__}")
    if max_order > 2:
        raise ConfigurationError("2D FD reference supports derivatives up to order 2")
    hx, hy = domain.lengths[0] / nx, domain.lengths[1] / nx
    Dx1, Dx2, _ = _fd_1d(nx, hx, kind)
    Dy1, Dy2, _ = _fd_1d(nx, hy, kind)
    mx, my = Dx2.shape[0], Dy2.shape[0]
    gx = domain.ax + hx * np.arange(mx)
    gy = domain.ay + hy * np.arange(my)
    X, Y = np.meshgrid(gx, gy, indexing='ij')                  # node (i, j) -> i * my + j
    Ix, Iy = sparse.identity(mx), sparse.identity(my)
    ops = {
        (): sparse.identity(mx * my, format='csr'),
        (0,): sparse.kron(Dx1, Iy, format='csr'),
        (1,): sparse.kron(Ix, Dy1, format='csr'),
        (0, 0): sparse.kron(Dx2, Iy, format='csr'),
        (0, 1): sparse.kron(Dx1, Dy1, format='csr'),
        (1, 1): sparse.kron(Ix, Dy2, format='csr'),
    }
    fixed = np.array([], dtype=np.int64)
    if kind == BoundaryKind.DIRICHLET:
        I_, J_ = np.meshgrid(np.arange(mx), np.arange(my), indexing="ij")
        on_edge = (I_ == 0) | (I_ == mx - 1) | (J_ == 0) | (J_ == my - 1)
        fixed = np.flatnonzero(on_edge.ravel())
    return FdGrid(np.column_stack([X.ravel(), Y.ravel()]), ops, fixed)


def grid_jets(grid, u):
    return {key: D @ u for key, D in grid.ops.items()}


def linearize(func, grid, u):
    """Value of func(jets) and its Jacobian sum_k diag(df/d jet_k) D_k as a sparse matrix"""
    jets = grid_jets(grid, u)
    value = np.asarray(value_of(func(jets)), dtype=float)
    n = len(u)
    J = sparse.csr_matrix((n, n))
    for key, D in grid.ops.items():
        dual = {k: Dual(v, np.ones(n) if k == key else np.zeros(n)) for k, v in jets.items()}
        c = np.broadcast_to(tangent_of(func(dual)), (n,))
        if np.any(c):
            J = J + sparse.diags(c) @ D
    return np.broadcast_to(value, (n,)), J.tocsr()


def _implicit_euler(grid, rhs_at, u0, dt, n_steps, record, progress=False):
    """Implicit Euler with Newton on G(u) = u - u_old - dt f(u); fixed nodes keep their initial values"""
    n = len(u0)
    free = np.ones(n, dtype=bool)
    free[grid.fixed] = False
    I = sparse.identity(n, format='csr')
    mask = sparse.diags(free.astype(float))
    u = u0.copy()
    out = {0: u.copy()} if 0 in record else {}
    for step in tqdm(range(1, n_steps + 1), disable=not progress, desc="reference"):
        t = step * dt
        u_old = u.copy()
        for it in range(NEWTON_MAX_ITERS):
            f, J = linearize(lambda jets: rhs_at(jets, t), grid, u)
            G = np.where(free, u - u_old - dt * f, 0.0)
            # fixed rows of mask @ J vanish, leaving identity rows
            du = spsolve((I - dt * mask @ J).tocsc(), -G)
            u = u + du
            if np.max(np.abs(du)) <= NEWTON_TOL * (1.0 + np.max(np.abs(u))):
                break
        else:
            raise SolverError(f"Newton did not converge at t={t:.6g}", residual=float(np.max(np.abs(G))))
        if not np.all(np.isfinite(u)):
            raise SolverError(f"reference solution blew up at t={t:.6g}", residual=float('inf'))
        if step in record:
            out[step] = u.copy()
    return out


def _step_indices(times, dt):
    steps = np.rint(np.asarray(times, dtype=float) / dt).astype(int)
    if np.any(np.abs(steps * dt - np.asarray(times)) > 1e-9 * max(1.0, float(np.max(times)))):
        raise ConfigurationError(f"output times {list(times)} are not multiples of dt={dt}")
    return steps


def _solve_fd(problem, nx, dt, times, params, progress, max_order):
    kind = _uniform_kind(problem)
    grid = fd_grid(problem.domain, nx, kind, max_order)
    params = np.zeros((1, problem.param_dim)) if params is None else np.atleast_2d(np.asarray(params, dtype=float))
    times = np.asarray(times, dtype=float)
    steps = _step_indices(times, dt)
    n = len(grid.x)
    values = np.empty((len(times), len(params), n))
    for k, alpha in enumerate(params):
        P = np.broadcast_to(alpha, (n, problem.param_dim))
        u0 = np.asarray(problem.u0_jets(grid.x, P, 0)[()], dtype=float)
        rhs_at = lambda jets, t, P=P: problem.rhs(jets, grid.x, P, t)
        snaps = _implicit_euler(grid, rhs_at, u0, dt, int(steps.max()), set(steps.tolist()), progress)
        for i, s in enumerate(steps):
            values[i, k] = snaps[s]
        logger.debug("reference %s alpha=%s done", problem.name, alpha.tolist())
    return ReferenceSolution(times, params, grid.x, values)


def reference_solver_1d(problem, nx, dt, times, params=None, progress=False):
    """
    Implicit Euler / second-order FD reference on an interval

    Args:
        problem: PdeProblem with an Interval domain
        nx: number of grid cells
        dt: time step; every output time must be a multiple of it
        params: (n_params, param_dim) grid, None for the non-parametric case
    """
    if not isinstance(problem.domain, Interval):
        raise ConfigurationError(f"{problem.name} is not posed on an interval")
    return _solve_fd(problem, nx, dt, times, params, progress, problem.order)


def reference_solver_2d(problem, nx, dt, times, params=None, progress=False):
    """Same as reference_solver_1d on a rectangle, nx cells per side"""
    if not isinstance(problem.domain, Rectangle):
        raise ConfigurationError(f"{problem.name} is not posed on a rectangle")
    return _solve_fd(problem, nx, dt, times, params, progress, problem.order)


def reference_static_2d(problem, nx):
    """FD solution of the static problem (homogeneous Dirichlet); returns (points, u)"""
    grid = fd_grid(problem.domain, nx, BoundaryKind.DIRICHLET, 2)
    n = len(grid.x)
    r0, J = linearize(lambda jets: problem.residual(jets, grid.x), grid, np.zeros(n))
    free = np.setdiff1d(np.arange(n), grid.fixed)
    u = np.zeros(n)
    u[free] = spsolve(J[free][:, free].tocsc(), -np.asarray(r0, dtype=float)[free])
    return grid.x, u


def static_residual_norm(problem, grid, u):
    """Max FD residual at interior nodes (converged-profile checks)"""
    free = np.setdiff1d(np.arange(len(u)), grid.fixed)
    r = problem.residual(grid_jets(grid, u), grid.x)
    return float(np.max(np.abs(np.asarray(r)[free])))


# --------------------------------------------------------------------------
# Finite elements on the domain with holes
# --------------------------------------------------------------------------

def reference_solver_fem(problem, mesh, dt, times, params=None, diffusion=0.001, order=2, progress=False):
    """
    Galerkin (P2 by default) + implicit Euler for u_t = diffusion * lap(u) + w . grad(u)

    Dirichlet DoFs are held at zero, Neumann boundaries are natural.
    (M + dt (diffusion K - A)) u_{n+1} = M u_n with A the advection matrix.
    The solution is reported at the mesh vertices, the point set of the exported eigenbases.
    """
    space = as_space(mesh, order)
    K, M = assemble_full(space)
    A = advection_matrix(space, _velocity_at_dofs(problem.velocity, space))
    free = space.free_dofs
    S = (M + dt * (diffusion * K - A)).tocsr()[free][:, free].tocsc()
    try:
        lu = splu(S)
    except RuntimeError as e:
        raise SolverError(f"implicit Euler matrix is singular: {e}", residual=float('nan'))
    Mf = M.tocsr()[free][:, free]

    times = np.asarray(times, dtype=float)
    steps = _step_indices(times, dt)
    params = np.zeros((1, problem.param_dim)) if params is None else np.atleast_2d(np.asarray(params, dtype=float))
    x = space.dof_coords
    n_vertices = space.mesh.n_nodes          # vertex DoFs come first
    values = np.zeros((len(times), len(params), n_vertices))
    record = {int(s): i for i, s in enumerate(steps)}
    u = np.zeros(len(x))
    for k, alpha in enumerate(params):
        P = np.broadcast_to(alpha, (len(x), problem.param_dim))
        u[:] = np.asarray(problem.u0_jets(x, P, 0)[()], dtype=float)
        u[space.dirichlet_dofs] = 0.0
        uf = u[free]
        if 0 in record:
            values[record[0], k] = u[:n_vertices]
        for step in tqdm(range(1, int(steps.max()) + 1), disable=not progress, desc="fem reference"):
            uf = lu.solve(Mf @ uf)
            if step in record:
                u[free] = uf
                values[record[step], k] = u[:n_vertices]
        if not np.all(np.isfinite(values[:, k])):
            raise SolverError(f"FE reference blew up for alpha={alpha.tolist()}", residual=float('inf'))
    return ReferenceSolution(times, params, x[:n_vertices], values)


def _velocity_at_dofs(velocity, space):
    # tables hold w at the mesh vertices; P2 edge midpoints take the P1 interpolant
    if velocity.func is not None or space.order == 1:
        return velocity.at(space.dof_coords)
    return nodal_to_dofs(space, velocity.at(space.mesh.nodes))
