"""
Laplace eigenfunctions on 2D triangle meshes (P1 / P2 Lagrange elements).

Pipeline: mesh -> FESpace -> assemble (K, M) -> solve_eigs (shift-invert
Lanczos) -> project_derivative (L2 projection of gradients, applied twice for
Hessians) -> export_basis (DiscreteBasis tabulated at chosen points).

Also: the plain-text mesh format, a structured unit-square mesh and a
unit square with circular holes.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, splu
from scipy.spatial import Delaunay, cKDTree

from lib.embedding import BoundaryKind, DiscreteBasis
from lib.errors import ConfigurationError, FormatError, MeshError, SolverError

logger = logging.getLogger(__name__)

# Dunavant degree-4 rule on the reference triangle (barycentric points, weights sum to 1)
_A, _WA = 0.445948490915965, 0.223381589678011
_B, _WB = 0.091576213509771, 0.109951743655322
QUAD_BARY = np.array([
    [1 - 2 * _A, _A, _A], [_A, 1 - 2 * _A, _A], [_A, _A, 1 - 2 * _A],
    [1 - 2 * _B, _B, _B], [_B, 1 - 2 * _B, _B], [_B, _B, 1 - 2 * _B],
])
QUAD_W = np.array([_WA, _WA, _WA, _WB, _WB, _WB])

DEFAULT_HOLES = ((0.35, 0.45, 0.1), (0.65, 0.3, 0.1))


# --------------------------------------------------------------------------
# Mesh
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray            # (n_e, 2) node indices
    edge_tags: tuple                      # tag per boundary edge
    tags: dict                            # tag -> BoundaryKind

    def __post_init__(self):
        object.__setattr__(self, 'nodes', np.asarray(self.nodes, dtype=float))
        tri = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, 'boundary_edges', np.asarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, 'edge_tags', tuple(self.edge_tags))
        object.__setattr__(self, 'tags', {k: BoundaryKind(v) for k, v in self.tags.items()})
        # orient counter-clockwise
        area = signed_areas(self.nodes, tri)
        flip = area < 0
        tri[flip] = tri[flip][:, [0, 2, 1]]
        object.__setattr__(self, 'triangles', tri)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def bbox_diag2(self):
        span = self.nodes.max(axis=0) - self.nodes.min(axis=0)
        return float(span @ span)

    def validate(self):
        """Raise MeshError on degenerate triangles, stray boundary edges or untagged edges"""
        area = np.abs(signed_areas(self.nodes, self.triangles))
        bad = np.flatnonzero(area < 1e-14 * self.bbox_diag2)
        if bad.size:
            raise MeshError(f"degenerate triangle {int(bad[0])} (area {area[bad[0]]:.3e})", triangle=int(bad[0]))
        counts = edge_counts(self.triangles)
        for e, (a, b) in enumerate(self.boundary_edges):
            if counts.get((min(a, b), max(a, b)), 0) != 1:
                raise MeshError(f"boundary edge {e} ({a}, {b}) does not belong to exactly one triangle")
        if len(self.edge_tags) != len(self.boundary_edges):
            raise MeshError("every boundary edge needs a tag")
        missing = sorted(set(self.edge_tags) - set(self.tags))
        if missing:
            raise MeshError(f"boundary tags without a condition: {missing}")
        return self

    def nodes_with(self, kind):
        kind = BoundaryKind(kind)
        rows = [i for i, tag in enumerate(self.edge_tags) if self.tags[tag] == kind]
        return np.unique(self.boundary_edges[rows]) if rows else np.zeros(0, dtype=np.int64)

    @property
    def has_dirichlet(self):
        return any(kind == BoundaryKind.DIRICHLET for tag, kind in self.tags.items() if tag in set(self.edge_tags))


def signed_areas(nodes, triangles):
    v0, v1, v2 = (nodes[triangles[:, i]] for i in range(3))
    d1, d2 = v1 - v0, v2 - v0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def edge_counts(triangles):
    counts = {}
    for a, b in np.sort(triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1):
        key = (int(a), int(b))
        counts[key] = counts.get(key, 0) + 1
    return counts


def read_mesh(path):
    """Parse the $Nodes / $Triangles / $BoundaryEdges / $Tags text format"""
    sections, current = {}, None
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for raw in f:
                line = raw.strip()
                if not line or line.startswith('#'):
                    continue
                if line.startswith('$'):
                    current = line[1:]
                    sections[current] = []
                elif current is None:
                    raise FormatError(f"{path}: data before the first section", field='header')
                else:
                    sections[current].append(line.split())
    except FileNotFoundError:
        raise ConfigurationError(f"mesh file not found: {path}")
    for name in ('Nodes', 'Triangles', 'BoundaryEdges', 'Tags'):
        if name not in sections:
            raise FormatError(f"{path}: missing section ${name}", field=name)
    try:
        rows = sorted((int(r[0]), float(r[1]), float(r[2])) for r in sections['Nodes'])
        if [r[0] for r in rows] != list(range(len(rows))):
            raise FormatError(f"{path}: node indices must be 0..n-1", field='Nodes')
        nodes = np.array([[r[1], r[2]] for r in rows])
        triangles = np.array([[int(v) for v in r[-3:]] for r in sections['Triangles']], dtype=np.int64)
        edges = np.array([[int(r[0]), int(r[1])] for r in sections['BoundaryEdges']], dtype=np.int64)
        edge_tags = [r[2] for r in sections['BoundaryEdges']]
        tags = {r[0]: r[1] for r in sections['Tags']}
    except (ValueError, IndexError) as e:
        raise FormatError(f"{path}: malformed line ({e})")
    if triangles.size and (triangles.max() >= len(nodes) or triangles.min() < 0):
        raise FormatError(f"{path}: triangle references unknown node", field='Triangles')
    return TriMesh(nodes, triangles, edges, edge_tags, tags).validate()


def write_mesh(mesh, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write('$Nodes\n')
        for i, (x, y) in enumerate(mesh.nodes):
            f.write(f"{i} {float(x)!r} {float(y)!r}\n")
        f.write('$Triangles\n')
        for a, b, c in mesh.triangles:
            f.write(f"{a} {b} {c}\n")
        f.write('$BoundaryEdges\n')
        for (a, b), tag in zip(mesh.boundary_edges, mesh.edge_tags):
            f.write(f"{a} {b} {tag}\n")
        f.write('$Tags\n')
        for tag, kind in mesh.tags.items():
            f.write(f"{tag} {kind.value}\n")
    logger.info("wrote mesh %s (%d nodes, %d triangles)", path, mesh.n_nodes, mesh.n_triangles)


def _side_tags(bc):
    sides = ('left', 'right', 'bottom', 'top')
    if isinstance(bc, dict):
        return {s: BoundaryKind(bc[s]) for s in sides}
    return {s: BoundaryKind(bc) for s in sides}


def square_mesh(n, bc='dirichlet'):
    """Structured right-triangle mesh of the unit square with n x n cells; tags left/right/bottom/top"""
    if n < 1:
        raise ConfigurationError(f"square mesh needs n >= 1, got {n}")
    g = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(g, g, indexing='xy')
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)   # idx[j, i] -> (x_i, y_j)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    triangles = np.vstack([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    edges, tags = [], []
    for i in range(n):
        edges += [(idx[i, 0], idx[i + 1, 0]), (idx[i, n], idx[i + 1, n]),
                  (idx[0, i], idx[0, i + 1]), (idx[n, i], idx[n, i + 1])]
        tags += ['left', 'right', 'bottom', 'top']
    return TriMesh(nodes, triangles, np.array(edges), tags, _side_tags(bc)).validate()


def holes_mesh(h=0.0125, holes=DEFAULT_HOLES, seed=0, top='dirichlet', walls='neumann'):
    """
    Unit square with circular holes (cx, cy, r)

    Boundary tags: 'top' (y = 1), 'wall' (other square sides), 'hole'.
    """
    rng = np.random.default_rng(seed)
    n_side = int(np.ceil(1.0 / h))
    s = np.linspace(0.0, 1.0, n_side + 1)
    outer = np.vstack([
        np.column_stack([s, np.zeros_like(s)]), np.column_stack([s, np.ones_like(s)]),
        np.column_stack([np.zeros_like(s[1:-1]), s[1:-1]]), np.column_stack([np.ones_like(s[1:-1]), s[1:-1]]),
    ])
    circles = []
    for cx, cy, r in holes:
        m = max(8, int(np.ceil(2 * np.pi * r / h)))
        ang = 2 * np.pi * np.arange(m) / m
        circles.append(np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)]))

    g = np.arange(h, 1.0 - 0.5 * h, h)
    X, Y = np.meshgrid(g, g)
    inner = np.column_stack([X.ravel(), Y.ravel()])
    inner = inner + rng.uniform(-0.15 * h, 0.15 * h, size=inner.shape)
    keep = np.all((inner > 0.5 * h) & (inner < 1 - 0.5 * h), axis=1)
    for cx, cy, r in holes:
        keep &= np.hypot(inner[:, 0] - cx, inner[:, 1] - cy) > r + 0.5 * h
    nodes = np.vstack([outer] + circles + [inner[keep]])

    tri = Delaunay(nodes).simplices
    cent = nodes[tri].mean(axis=1)
    inside = np.zeros(len(tri), dtype=bool)
    for cx, cy, r in holes:
        inside |= np.hypot(cent[:, 0] - cx, cent[:, 1] - cy) < r
    tri = tri[~inside]
    area = np.abs(signed_areas(nodes, tri))
    tri = tri[area > 1e-10 * h * h]

    counts = edge_counts(tri)
    edges, tags = [], []
    for (a, b), c in counts.items():
        if c != 1:
            continue
        pa, pb = nodes[a], nodes[b]
        if abs(pa[1] - 1.0) < 1e-12 and abs(pb[1] - 1.0) < 1e-12:
            tag = 'top'
        elif all(min(p[0], p[1], 1 - p[0], 1 - p[1]) < 1e-12 for p in (pa, pb)):
            tag = 'wall'
        else:
            tag = 'hole'
        edges.append((a, b))
        tags.append(tag)
    mesh = TriMesh(nodes, tri, np.array(edges), tags, {'top': top, 'wall': walls, 'hole': walls})
    logger.info("holes mesh: %d nodes, %d triangles, %d boundary edges", mesh.n_nodes, mesh.n_triangles, len(edges))
    return mesh.validate()


# --------------------------------------------------------------------------
# Finite element space
# --------------------------------------------------------------------------

def shape_functions(order, bary):
    """Values (q, n_loc) and reference gradients (q, n_loc, 2) at barycentric points"""
    bary = np.atleast_2d(bary)
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    if order == 1:
        N = np.column_stack([l0, l1, l2])
        dN = np.broadcast_to(dl, (len(bary), 3, 2)).copy()
        return N, dN
    lam = [l0, l1, l2]
    N = np.column_stack([lam[i] * (2 * lam[i] - 1) for i in range(3)] +
                        [4 * lam[a] * lam[b] for a, b in ((0, 1), (1, 2), (2, 0))])
    dN = np.empty((len(bary), 6, 2))
    for i in range(3):
        dN[:, i, :] = (4 * lam[i] - 1)[:, None] * dl[i]
    for k, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
        dN[:, 3 + k, :] = 4 * (lam[b][:, None] * dl[a] + lam[a][:, None] * dl[b])
    return N, dN


@dataclass(eq=False)
class FESpace:
    mesh: TriMesh
    order: int
    dof_coords: np.ndarray
    cell_dofs: np.ndarray
    dirichlet_dofs: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_dofs(self):
        return self.dof_coords.shape[0]

    @property
    def free_dofs(self):
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)

    def geometry(self):
        """Per-triangle inverse-transpose Jacobians (n_t, 2, 2) and areas"""
        if 'geometry' not in self._cache:
            tri = self.mesh.triangles
            v0, v1, v2 = (self.mesh.nodes[tri[:, i]] for i in range(3))
            J = np.stack([v1 - v0, v2 - v0], axis=2)          # columns
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            area = 0.5 * np.abs(det)
            bad = np.flatnonzero(area < 1e-14 * self.mesh.bbox_diag2)
            if bad.size:
                raise MeshError(f"degenerate triangle {int(bad[0])}", triangle=int(bad[0]))
            invJT = np.linalg.inv(J).transpose(0, 2, 1)
            self._cache['geometry'] = (invJT, area)
        return self._cache['geometry']


def fe_space(mesh, order=1):
    if order not in (1, 2):
        raise ConfigurationError(f"element order must be 1 or 2, got {order}")
    mesh.validate()
    dirichlet_nodes = mesh.nodes_with(BoundaryKind.DIRICHLET)
    if order == 1:
        return FESpace(mesh, 1, mesh.nodes.copy(), mesh.triangles.copy(), dirichlet_nodes)

    local_edges = mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 3, 2)
    sorted_edges = np.sort(local_edges.reshape(-1, 2), axis=1)
    unique, inverse = np.unique(sorted_edges, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    mid_dofs = mesh.n_nodes + inverse.reshape(-1, 3)
    cell_dofs = np.column_stack([mesh.triangles, mid_dofs])
    coords = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[unique[:, 0]] + mesh.nodes[unique[:, 1]])])

    edge_index = {(int(a), int(b)): mesh.n_nodes + k for k, (a, b) in enumerate(unique)}
    dirichlet = list(dirichlet_nodes)
    for (a, b), tag in zip(mesh.boundary_edges, mesh.edge_tags):
        if mesh.tags[tag] == BoundaryKind.DIRICHLET:
            dirichlet.append(edge_index[(min(a, b), max(a, b))])
    return FESpace(mesh, 2, coords, cell_dofs, np.unique(np.array(dirichlet, dtype=np.int64)))


def as_space(obj, order=1):
    return obj if isinstance(obj, FESpace) else fe_space(obj, order)


def nodal_to_dofs(space, values):
    """P1 interpolant of vertex values at every DoF of the space (edge midpoints average their ends)"""
    values = np.asarray(values, dtype=float)
    if space.order == 1:
        return values
    out = np.empty((space.n_dofs,) + values.shape[1:])
    out[:space.mesh.n_nodes] = values
    cd = space.cell_dofs
    for k, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
        out[cd[:, 3 + k]] = 0.5 * (values[cd[:, a]] + values[cd[:, b]])
    return out


def _scatter(space, local):
    """Assemble (n_t, n_loc, n_loc) local matrices into a CSR matrix"""
    cd = space.cell_dofs
    n_loc = cd.shape[1]
    i = np.repeat(cd, n_loc, axis=1).ravel()
    j = np.tile(cd, (1, n_loc)).ravel()
    return sparse.csr_matrix((local.ravel(), (i, j)), shape=(space.n_dofs, space.n_dofs))


def _quadrature_data(space):
    if 'quad' not in space._cache:
        invJT, area = space.geometry()
        N, dN_ref = shape_functions(space.order, QUAD_BARY)
        G = np.einsum('tab,qib->tqia', invJT, dN_ref)         # physical gradients
        space._cache['quad'] = (N, G, area)
    return space._cache['quad']


def assemble_full(space):
    """Stiffness and mass on all DoFs (no boundary conditions applied)"""
    if 'KM' not in space._cache:
        N, G, area = _quadrature_data(space)
        wa = QUAD_W[None, :] * area[:, None]                   # (t, q)
        K_loc = np.einsum('tq,tqia,tqja->tij', wa, G, G)
        M_loc = np.einsum('tq,qi,qj->tij', wa, N, N)
        space._cache['KM'] = (_scatter(space, K_loc), _scatter(space, M_loc))
    return space._cache['KM']


def derivative_matrix(space, component):
    """D[j, i] = integral of v_j * dN_i/dx_component"""
    key = ('D', component)
    if key not in space._cache:
        N, G, area = _quadrature_data(space)
        wa = QUAD_W[None, :] * area[:, None]
        D_loc = np.einsum('tq,qj,tqi->tji', wa, N, G[..., component])
        space._cache[key] = _scatter(space, D_loc)
    return space._cache[key]


def advection_matrix(space, w_dofs):
    """A[j, i] = integral of v_j (w . grad N_i) with w given at the DoFs"""
    N, G, area = _quadrature_data(space)
    wa = QUAD_W[None, :] * area[:, None]
    w_cells = w_dofs[space.cell_dofs]                          # (t, n_loc, 2)
    w_q = np.einsum('qk,tkd->tqd', N, w_cells)
    A_loc = np.einsum('tq,qj,tqd,tqid->tji', wa, N, w_q, G)
    return _scatter(space, A_loc)


def assemble(mesh, element_order=1):
    """
    Stiffness K and mass M with Dirichlet DoFs eliminated

    Returns:
        (K, M) restricted to the free DoFs (symmetric elimination)
    """
    space = as_space(mesh, element_order)
    K, M = assemble_full(space)
    free = space.free_dofs
    return K[free][:, free].tocsc(), M[free][:, free].tocsc()


# --------------------------------------------------------------------------
# Eigenproblem
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EigenSolution:
    eigenvalues: np.ndarray
    coeffs: np.ndarray               # (n_dof, n_phi), M-orthonormal columns
    residuals: np.ndarray


def has_constant_kernel(K):
    ones = np.ones(K.shape[0])
    return np.max(np.abs(K @ ones)) <= 1e-10 * max(1.0, abs(K).max())


def solve_eigs(K, M, n_phi, tol=1e-9, free=None, n_total=None):
    """
    n_phi smallest eigenpairs of K c = lambda M c by shift-invert Lanczos

    For a pure-Neumann system the constant mode is computed and dropped.
    free / n_total embed the coefficient vectors back into the full DoF set.
    """
    n = K.shape[0]
    neumann = has_constant_kernel(K)
    k = n_phi + 1 if neumann else n_phi
    if n_phi < 1 or k >= n / 4:
        raise ConfigurationError(f"n_phi={n_phi} must satisfy 1 <= n_phi < n_dof/4 (n_dof={n})")
    sigma = -1e-8 * M.diagonal().sum() if neumann else 0.0
    try:
        lu = splu((K - sigma * M).tocsc())
    except RuntimeError as e:
        raise SolverError(f"factorization of the shifted stiffness failed: {e}")
    op_inv = LinearOperator(K.shape, matvec=lu.solve, dtype=float)
    try:
        vals, vecs = eigsh(K, k, M, sigma=sigma, which='LM', OPinv=op_inv, tol=tol)
    except ArpackNoConvergence as e:
        res = _residuals(K, M, e.eigenvalues, e.eigenvectors) if len(e.eigenvalues) else np.array([np.inf])
        raise SolverError(f"eigensolver did not converge ({len(e.eigenvalues)}/{k} pairs)", residual=float(res.max()))

    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    if neumann:
        vals, vecs = vals[1:], vecs[:, 1:]

    # M-orthonormalize
    gram = vecs.T @ (M @ vecs)
    L = np.linalg.cholesky(0.5 * (gram + gram.T))
    vecs = np.linalg.solve(L, vecs.T).T
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    vecs = vecs * signs

    res = _residuals(K, M, vals, vecs)
    limit = max(1e3 * tol, 1e-6)
    if np.any(res > limit):
        raise SolverError("eigenpair residual above tolerance", residual=float(res.max()))
    logger.info("eigensolve: %d pairs, lambda in [%.4g, %.4g], max residual %.2e", len(vals), vals[0], vals[-1], res.max())

    if free is not None:
        full = np.zeros((n_total, vecs.shape[1]))
        full[free] = vecs
        vecs = full
    return EigenSolution(vals, vecs, res)


def _residuals(K, M, vals, vecs):
    Kc, Mc = K @ vecs, M @ vecs
    num = np.linalg.norm(Kc - Mc * vals, axis=0)
    den = np.linalg.norm(Kc, axis=0) + np.abs(vals) * np.linalg.norm(Mc, axis=0)
    return num / np.where(den > 0, den, 1.0)


# --------------------------------------------------------------------------
# Derivatives, evaluation and export
# --------------------------------------------------------------------------

def _mass_lu(space):
    if 'M_lu' not in space._cache:
        _, M = assemble_full(space)
        space._cache['M_lu'] = splu(M.tocsc())
    return space._cache['M_lu']


def project_derivative(space, coeffs, component):
    """L2 projection of d/dx_component of an FE function: M g = b, b_j = integral of dphi/dx_c v_j"""
    space = as_space(space)
    b = derivative_matrix(space, component) @ coeffs
    return _mass_lu(space).solve(np.asarray(b, dtype=float))


def locate(space, points, tol=1e-10):
    """Containing triangle and barycentric coordinates of each point"""
    mesh = space.mesh
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri = mesh.triangles
    v0 = mesh.nodes[tri[:, 0]]
    invJT, _ = space.geometry()
    invJ = invJT.transpose(0, 2, 1)
    if 'tree' not in space._cache:
        space._cache['tree'] = cKDTree(mesh.nodes[tri].mean(axis=1))
    tree = space._cache['tree']

    cells = np.full(len(points), -1, dtype=np.int64)
    bary = np.zeros((len(points), 3))
    k = min(16, len(tri))
    _, cand = tree.query(points, k=k)
    cand = np.asarray(cand).reshape(len(points), -1)
    for col in range(cand.shape[1]):
        todo = np.flatnonzero(cells < 0)
        if not todo.size:
            break
        t = cand[todo, col]
        xi = np.einsum('nab,nb->na', invJ[t], points[todo] - v0[t])
        lam = np.column_stack([1 - xi.sum(axis=1), xi])
        ok = np.all(lam >= -tol, axis=1)
        cells[todo[ok]] = t[ok]
        bary[todo[ok]] = lam[ok]
    # brute force for what the neighbour search missed
    for p in np.flatnonzero(cells < 0):
        xi = np.einsum('tab,tb->ta', invJ, points[p] - v0)
        lam = np.column_stack([1 - xi.sum(axis=1), xi])
        inside = np.flatnonzero(np.all(lam >= -tol, axis=1))
        if not inside.size:
            raise MeshError(f"point {points[p].tolist()} lies outside the mesh")
        cells[p] = inside[0]
        bary[p] = lam[inside[0]]
    return cells, bary


def fe_function_at(space, coeffs, points, cells=None, bary=None):
    """Evaluate FE function(s) (n_dof,) or (n_dof, m) at points"""
    if cells is None:
        cells, bary = locate(space, points)
    N, _ = shape_functions(space.order, bary)
    local = coeffs[space.cell_dofs[cells]]                    # (n, n_loc[, m])
    if local.ndim == 2:
        return np.einsum('ni,ni->n', N, local)
    return np.einsum('ni,nim->nm', N, local)


def export_basis(space, eigsol, points=None, provenance=None):
    """
    Tabulate values, projected gradients and Hessians of all eigenfunctions

    Args:
        points: None for all mesh nodes, otherwise coordinates inside the mesh
    """
    space = as_space(space)
    C = eigsol.coeffs
    d = 2
    grads_c = [project_derivative(space, C, l) for l in range(d)]
    hess_c = [[project_derivative(space, grads_c[l], k) for k in range(d)] for l in range(d)]

    if points is None:
        pts = space.mesh.nodes.copy()
        rows = np.arange(space.mesh.n_nodes)
        at = lambda coeffs: coeffs[rows]
    else:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cells, bary = locate(space, pts)
        at = lambda coeffs: fe_function_at(space, coeffs, pts, cells, bary)

    values = at(C)
    grads = np.stack([at(g) for g in grads_c], axis=2)
    hess = np.empty((len(pts), C.shape[1], d, d))
    for l in range(d):
        for k in range(d):
            hess[:, :, l, k] = at(hess_c[l][k])
    hess = 0.5 * (hess + hess.transpose(0, 1, 3, 2))

    manifest = {'element_order': space.order, 'n_dofs': int(space.n_dofs),
                'max_residual': float(np.max(eigsol.residuals)) if len(eigsol.residuals) else 0.0}
    manifest.update(provenance or {})
    return DiscreteBasis(pts, values, grads, hess, np.asarray(eigsol.eigenvalues, dtype=float), manifest)


def laplace_basis(mesh, order=1, n_phi=10, tol=1e-9, points=None, provenance=None):
    """assemble -> solve_eigs -> export_basis"""
    space = as_space(mesh, order)
    K, M = assemble_full(space)
    free = space.free_dofs
    sol = solve_eigs(K[free][:, free].tocsc(), M[free][:, free].tocsc(), n_phi, tol, free, space.n_dofs)
    prov = {'solver_tol': tol}
    prov.update(provenance or {})
    return export_basis(space, sol, points, prov), space, sol


def mesh_size(mesh):
    """Longest triangle edge"""
    tri = mesh.nodes[mesh.triangles]
    edges = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 1], tri[:, 0] - tri[:, 2]], axis=1)
    return float(np.linalg.norm(edges, axis=2).max())
