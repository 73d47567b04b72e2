"""
Positional embeddings Phi(x) for the network input layer.

Three kinds of bases are provided:
- AnalyticBasis: Laplace eigenfunctions on an interval or rectangle, with
  Dirichlet / Neumann / periodic conditions per side (harmonic features)
- FourierBasis: Gaussian random Fourier features
- DiscreteBasis: eigenfunctions tabulated at fixed points (produced by lib.fem)

Every basis answers evaluate(x, max_order) with an EmbeddingEval that carries
values and spatial derivatives of all features at the query points.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from lib.errors import CapabilityError, ConfigurationError, FormatError, LookupFailure

logger = logging.getLogger(__name__)

MAGIC = b'EDNB'
FORMAT_VERSION = 1


class BoundaryKind(str, Enum):
    DIRICHLET = 'dirichlet'
    NEUMANN = 'neumann'
    PERIODIC = 'periodic'


@dataclass(frozen=True)
class Interval:
    a: float
    b: float

    @property
    def dim(self):
        return 1

    @property
    def lengths(self):
        return (self.b - self.a,)

    @property
    def lower(self):
        return (self.a,)


@dataclass(frozen=True)
class Rectangle:
    ax: float
    bx: float
    ay: float
    by: float

    @property
    def dim(self):
        return 2

    @property
    def lengths(self):
        return (self.bx - self.ax, self.by - self.ay)

    @property
    def lower(self):
        return (self.ax, self.ay)


UNIT_SQUARE = Rectangle(0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True)
class EmbeddingEval:
    """Features and their spatial derivatives at n query points.

    phi: (n, n_features); grad: (n, n_features, d); hess: (n, n_features, d, d);
    third: (n, n_features), only for 1D bases.
    """
    phi: np.ndarray
    grad: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None
    third: Optional[np.ndarray] = None

    @property
    def n_points(self):
        return self.phi.shape[0]

    @property
    def max_order(self):
        if self.grad is None:
            return 0
        if self.hess is None:
            return 1
        if self.third is None:
            return 2
        return 3

    def take(self, rows):
        """Sub-select points (used when drawing collocation batches)"""
        pick = lambda a: None if a is None else a[rows]
        return EmbeddingEval(self.phi[rows], pick(self.grad), pick(self.hess), pick(self.third))


# --------------------------------------------------------------------------
# Analytic eigenfunctions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Factor1D:
    """One-dimensional factor trig(k (x - x0)) of a separable eigenfunction."""
    trig: str          # 'sin' | 'cos'
    k: float
    x0: float
    index: int         # position in the 1D mode sequence (0 = constant where present)

    @property
    def is_constant(self):
        return self.trig == 'cos' and self.k == 0.0

    def derivatives(self, x, max_order):
        """[f, f', f'', f'''] up to max_order at x (array)"""
        arg = self.k * (x - self.x0)
        s, c = np.sin(arg), np.cos(arg)
        k = self.k
        if self.trig == 'sin':
            seq = [s, k * c, -k ** 2 * s, -k ** 3 * c]
        else:
            seq = [c, -k * s, -k ** 2 * c, k ** 3 * s]
        return seq[:max_order + 1]


def _axis_factors(a, b, left, right, count):
    """First `count` 1D factors of -f'' = k^2 f on (a, b) with the given end conditions."""
    L = b - a
    periodic = (left == BoundaryKind.PERIODIC, right == BoundaryKind.PERIODIC)
    if any(periodic) and not all(periodic):
        raise ConfigurationError(
            f"unsupported boundary pairing ({left.value}, {right.value}): periodic applies to both ends")

    factors = []
    if left == BoundaryKind.PERIODIC:
        factors.append(Factor1D('cos', 0.0, 0.0, 0))
        m = 1
        while len(factors) < count:
            k = 2.0 * np.pi * m / L
            factors.append(Factor1D('cos', k, 0.0, 2 * m - 1))
            factors.append(Factor1D('sin', k, 0.0, 2 * m))
            m += 1
    elif left == BoundaryKind.DIRICHLET and right == BoundaryKind.DIRICHLET:
        for m in range(1, count + 1):
            factors.append(Factor1D('sin', m * np.pi / L, a, m))
    elif left == BoundaryKind.NEUMANN and right == BoundaryKind.NEUMANN:
        for m in range(0, count):
            factors.append(Factor1D('cos', m * np.pi / L, a, m))
    elif left == BoundaryKind.DIRICHLET:
        # Dirichlet at a, Neumann at b
        for m in range(1, count + 1):
            factors.append(Factor1D('sin', (m - 0.5) * np.pi / L, a, m))
    else:
        # Neumann at a, Dirichlet at b
        for m in range(1, count + 1):
            factors.append(Factor1D('cos', (m - 0.5) * np.pi / L, a, m))
    return factors[:count]


def _parse_bc(domain, bc):
    n_sides = 2 * domain.dim
    if isinstance(bc, (str, BoundaryKind)):
        bc = [bc] * n_sides
    bc = [BoundaryKind(b) for b in bc]
    if len(bc) != n_sides:
        raise ConfigurationError(f"domain needs {n_sides} boundary kinds, got {len(bc)}")
    return tuple(bc)


@dataclass(frozen=True)
class AnalyticBasis:
    """Harmonic features on an interval or rectangle.

    bc lists one BoundaryKind per side: (left, right) for an interval,
    (left, right, bottom, top) for a rectangle. modes[i] holds one Factor1D per axis.
    """
    domain: object
    bc: tuple
    modes: tuple
    eigenvalues: np.ndarray

    @property
    def n_phi(self):
        return len(self.modes)

    @property
    def n_features(self):
        return len(self.modes)

    @property
    def dim(self):
        return self.domain.dim

    @property
    def max_order(self):
        return 3 if self.dim == 1 else 2

    @property
    def mode_table(self):
        """Integer mode multi-indices with eigenvalues"""
        return [(tuple(f.index for f in mode), float(lam)) for mode, lam in zip(self.modes, self.eigenvalues)]

    def evaluate(self, x, max_order=2):
        x = _as_points(x, self.dim)
        _check_order(max_order, self.dim)
        n, d = x.shape
        per_axis = []
        for axis in range(d):
            per_axis.append([f.derivatives(x[:, axis], max_order) for f in (m[axis] for m in self.modes)])

        # per_axis[axis][mode][order] -> (n,)
        def factor(axis, order):
            return np.stack([per_axis[axis][i][order] for i in range(self.n_phi)], axis=1)

        if d == 1:
            phi = factor(0, 0)
            grad = factor(0, 1)[:, :, None] if max_order >= 1 else None
            hess = factor(0, 2)[:, :, None, None] if max_order >= 2 else None
            third = factor(0, 3) if max_order >= 3 else None
            return EmbeddingEval(phi, grad, hess, third)

        f0, g0 = factor(0, 0), factor(1, 0)
        phi = f0 * g0
        grad = hess = None
        if max_order >= 1:
            f1, g1 = factor(0, 1), factor(1, 1)
            grad = np.stack([f1 * g0, f0 * g1], axis=2)
        if max_order >= 2:
            f2, g2 = factor(0, 2), factor(1, 2)
            hess = np.empty((n, self.n_phi, 2, 2))
            hess[:, :, 0, 0] = f2 * g0
            hess[:, :, 1, 1] = f0 * g2
            hess[:, :, 0, 1] = hess[:, :, 1, 0] = f1 * g1
        return EmbeddingEval(phi, grad, hess, None)


def analytic_eigenpairs(domain, bc, n_phi):
    """
    Lowest n_phi Laplace eigenfunctions of an interval or rectangle

    Args:
        domain: Interval or Rectangle
        bc: one BoundaryKind (all sides) or one per side
        n_phi: number of basis functions

    Returns:
        AnalyticBasis with eigenvalues in non-decreasing order. Degenerate
        eigenvalues are ordered by the mode multi-index read from the last axis
        to the first. The all-constant mode is never included.
    """
    if n_phi < 1:
        raise ConfigurationError(f"n_phi must be >= 1, got {n_phi}")
    bc = _parse_bc(domain, bc)
    count = n_phi + 2
    axes = []
    for axis in range(domain.dim):
        lo = domain.lower[axis]
        hi = lo + domain.lengths[axis]
        axes.append(_axis_factors(lo, hi, bc[2 * axis], bc[2 * axis + 1], count))

    if domain.dim == 1:
        candidates = [(f,) for f in axes[0]]
    else:
        candidates = [(fx, fy) for fx in axes[0] for fy in axes[1]]
    candidates = [c for c in candidates if not all(f.is_constant for f in c)]
    candidates.sort(key=lambda c: (round(sum(f.k ** 2 for f in c), 12),
                                   tuple(f.index for f in reversed(c))))
    modes = tuple(candidates[:n_phi])
    eigenvalues = np.array([sum(f.k ** 2 for f in c) for c in modes])
    return AnalyticBasis(domain, bc, modes, eigenvalues)


def boundary_points(domain, n_per_side, seed=0):
    """
    Random points on every side of an analytic domain

    Returns:
        (points (m, d), normals (m, d), side index (m,))
    """
    rng = np.random.default_rng(seed)
    if domain.dim == 1:
        pts = np.array([[domain.a], [domain.b]])
        normals = np.array([[-1.0], [1.0]])
        return pts, normals, np.array([0, 1])
    pts, normals, sides = [], [], []
    s = rng.uniform(0.0, 1.0, size=(4, n_per_side))
    lx, ly = domain.lengths
    for side in range(4):
        t = s[side]
        if side == 0:
            p = np.column_stack([np.full(n_per_side, domain.ax), domain.ay + ly * t]); nrm = (-1.0, 0.0)
        elif side == 1:
            p = np.column_stack([np.full(n_per_side, domain.bx), domain.ay + ly * t]); nrm = (1.0, 0.0)
        elif side == 2:
            p = np.column_stack([domain.ax + lx * t, np.full(n_per_side, domain.ay)]); nrm = (0.0, -1.0)
        else:
            p = np.column_stack([domain.ax + lx * t, np.full(n_per_side, domain.by)]); nrm = (0.0, 1.0)
        pts.append(p)
        normals.append(np.tile(nrm, (n_per_side, 1)))
        sides.append(np.full(n_per_side, side))
    return np.vstack(pts), np.vstack(normals), np.concatenate(sides)


# --------------------------------------------------------------------------
# Fourier features and the identity embedding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierBasis:
    """Random Fourier features [cos(b_i.x), sin(b_i.x)], i = 1..n_phi"""
    freq_matrix: np.ndarray
    lengthscale: float
    seed: int

    @property
    def n_phi(self):
        return self.freq_matrix.shape[0]

    @property
    def n_features(self):
        return 2 * self.freq_matrix.shape[0]

    @property
    def dim(self):
        return self.freq_matrix.shape[1]

    @property
    def max_order(self):
        return 3 if self.dim == 1 else 2

    def evaluate(self, x, max_order=2):
        x = _as_points(x, self.dim)
        _check_order(max_order, self.dim)
        B = self.freq_matrix
        arg = x @ B.T
        c, s = np.cos(arg), np.sin(arg)
        phi = np.concatenate([c, s], axis=1)
        grad = hess = third = None
        if max_order >= 1:
            # d/dx cos = -sin b ; d/dx sin = cos b
            grad = np.concatenate([-s[:, :, None] * B[None], c[:, :, None] * B[None]], axis=1)
        if max_order >= 2:
            bb = np.einsum('il,ik->ilk', B, B)
            hess = np.concatenate([-c[:, :, None, None] * bb[None], -s[:, :, None, None] * bb[None]], axis=1)
        if max_order >= 3:
            b3 = B[:, 0] ** 3
            third = np.concatenate([s * b3, -c * b3], axis=1)
        return EmbeddingEval(phi, grad, hess, third)


def fourier_features(sigma, n_phi, d, seed):
    """Gaussian frequencies b_i ~ N(0, sigma^2 I), reproducible from the seed"""
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    return FourierBasis(rng.normal(0.0, sigma, size=(n_phi, d)), float(sigma), int(seed))


@dataclass(frozen=True)
class IdentityBasis:
    """Phi(x) = x: a network without a positional embedding"""
    dim: int

    @property
    def n_phi(self):
        return self.dim

    @property
    def n_features(self):
        return self.dim

    @property
    def max_order(self):
        return 3

    def evaluate(self, x, max_order=2):
        x = _as_points(x, self.dim)
        n, d = x.shape
        eye = np.broadcast_to(np.eye(d), (n, d, d))
        return EmbeddingEval(
            x.copy(),
            eye.copy() if max_order >= 1 else None,
            np.zeros((n, d, d, d)) if max_order >= 2 else None,
            np.zeros((n, d)) if (max_order >= 3 and d == 1) else None,
        )


# --------------------------------------------------------------------------
# Tabulated (FE) embeddings
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteBasis:
    points: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    hessians: np.ndarray
    eigenvalues: np.ndarray
    manifest: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n_s, d = self.points.shape
        n_phi = self.eigenvalues.shape[0]
        expected = {
            'values': (n_s, n_phi),
            'grads': (n_s, n_phi, d),
            'hessians': (n_s, n_phi, d, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise FormatError(f"{name} has shape {getattr(self, name).shape}, expected {shape}", field=name)
        if not np.all(np.isfinite(self.points)):
            raise FormatError("non-finite point coordinates", field='points')
        index = {}
        for row, key in enumerate(point_keys(self.points)):
            index.setdefault(key, row)
        object.__setattr__(self, '_index', index)

    @property
    def n_phi(self):
        return self.eigenvalues.shape[0]

    @property
    def n_features(self):
        return self.eigenvalues.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def max_order(self):
        return 2

    def index_of(self, x):
        """Row of each query point in the table; no interpolation"""
        x = _as_points(x, self.dim)
        rows = np.empty(len(x), dtype=np.int64)
        for i, key in enumerate(point_keys(x)):
            row = self._index.get(key)
            if row is None:
                raise LookupFailure(f"point {x[i].tolist()} is not tabulated in the discrete basis")
            rows[i] = row
        return rows

    def evaluate_rows(self, rows, max_order=2):
        if max_order > 2:
            raise CapabilityError("discrete bases provide derivatives up to order 2")
        return EmbeddingEval(
            self.values[rows],
            self.grads[rows] if max_order >= 1 else None,
            self.hessians[rows] if max_order >= 2 else None,
        )

    def evaluate(self, x, max_order=2):
        if max_order > 2:
            raise CapabilityError("discrete bases provide derivatives up to order 2")
        return self.evaluate_rows(self.index_of(x), max_order)


def eval_embedding(basis, x, max_order=2):
    """Values and spatial derivatives of every feature of `basis` at points x"""
    if max_order not in (0, 1, 2, 3):
        raise CapabilityError(f"max_order must be in 0..3, got {max_order}")
    return basis.evaluate(x, max_order)


def save_discrete(basis, path, provenance=None):
    """Write the EDNB binary file and its JSON sidecar manifest"""
    n_s, d = basis.points.shape
    n_phi = basis.n_phi
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<I', FORMAT_VERSION))
        f.write(struct.pack('<QQQ', n_s, d, n_phi))
        for arr in (basis.eigenvalues, basis.points, basis.values, basis.grads, basis.hessians):
            f.write(np.ascontiguousarray(arr, dtype='<f8').tobytes())
    manifest = dict(basis.manifest)
    manifest.update(provenance or {})
    manifest.update({'n_s': int(n_s), 'd': int(d), 'n_phi': int(n_phi), 'format_version': FORMAT_VERSION})
    with open(path + '.json', 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    logger.info("saved discrete basis %s (n_s=%d, n_phi=%d)", path, n_s, n_phi)


def load_discrete(path):
    """Read an EDNB file; raises FormatError naming the offending field"""
    if not os.path.exists(path):
        raise ConfigurationError(f"embedding file not found: {path}")
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < 32:
        raise FormatError(f"{path}: truncated header", field='header')
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", field='magic')
    (version,) = struct.unpack('<I', blob[4:8])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}", field='version')
    n_s, d, n_phi = struct.unpack('<QQQ', blob[8:32])

    offset = 32
    layout = [
        ('eigenvalues', (n_phi,)),
        ('points', (n_s, d)),
        ('values', (n_s, n_phi)),
        ('grads', (n_s, n_phi, d)),
        ('hessians', (n_s, n_phi, d, d)),
    ]
    arrays = {}
    for name, shape in layout:
        nbytes = 8 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated while reading {name} (expected shape {shape})", field=name)
        arrays[name] = np.frombuffer(blob, dtype='<f8', count=nbytes // 8, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after hessians", field='hessians')

    manifest = {}
    if os.path.exists(path + '.json'):
        with open(path + '.json', 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    return DiscreteBasis(arrays['points'], arrays['values'], arrays['grads'], arrays['hessians'],
                         arrays['eigenvalues'], manifest)


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    if x.shape[1] != dim:
        raise FormatError(f"points have {x.shape[1]} coordinates, basis is {dim}D", field='points')
    return x


def point_keys(x):
    # adding 0.0 folds -0.0 onto 0.0
    x = np.ascontiguousarray(np.asarray(x, dtype=float) + 0.0, dtype='<f8')
    return [p.tobytes() for p in x]


def _check_order(max_order, dim):
    if max_order == 3 and dim > 1:
        raise CapabilityError("third derivatives are only available for 1D bases")
    if max_order not in (0, 1, 2, 3):
        raise CapabilityError(f"max_order must be in 0..3, got {max_order}")
