"""
Active sampling of collocation points.

A fixed candidate set over space x parameter box is built once (with its
embedding evaluations tabulated). Every time step the candidates are weighted
by the size of the PDE dynamics and a batch is drawn with replacement through
a Vose alias table.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from lib.autodiff import value_of
from lib.embedding import DiscreteBasis, Interval, Rectangle
from lib.errors import ConfigurationError, SamplingError
from lib.network import RAW, NetQuery, wrapped_jets

logger = logging.getLogger(__name__)

CRITERIA = ('abs_rhs', 'abs_advection', 'uniform')
UNIFORM_FALLBACK = 1e-14

# collocation batches are plain network queries
CollocationBatch = NetQuery


@dataclass(frozen=True, eq=False)
class CandidateSet:
    query: NetQuery
    spatial_rows: Optional[np.ndarray]
    spatial_source: str
    param_box: tuple
    seed: int

    @property
    def n(self):
        return self.query.n

    @property
    def x(self):
        return self.query.x

    @property
    def params(self):
        return self.query.params


@dataclass(frozen=True)
class ProbWeights:
    omega: np.ndarray
    p: np.ndarray
    fallback: bool = False


def build_candidates(spatial_set, param_box, n, seed, basis, max_order=2):
    """
    n independent pairs (x_i, alpha_i): x uniform over the spatial set, alpha uniform over the box

    Args:
        spatial_set: array of allowed points (mesh nodes / tabulated points) or an Interval / Rectangle
        param_box: sequence of (lo, hi) per parameter; may be empty
        basis: embedding evaluated once per candidate
    """
    if n < 1:
        raise ConfigurationError(f"candidate count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    rows = None
    if isinstance(spatial_set, (Interval, Rectangle)):
        lo = np.array(spatial_set.lower)
        hi = lo + np.array(spatial_set.lengths)
        x = rng.uniform(lo, hi, size=(n, spatial_set.dim))
        source = 'box'
    else:
        pts = np.asarray(spatial_set, dtype=float)
        if pts.ndim != 2 or len(pts) == 0:
            raise ConfigurationError("empty spatial point set for candidate construction")
        rows = rng.integers(0, len(pts), size=n)
        x = pts[rows]
        source = 'points'

    box = tuple((float(lo), float(hi)) for lo, hi in param_box)
    if box:
        lows = np.array([b[0] for b in box])
        highs = np.array([b[1] for b in box])
        params = lows + (highs - lows) * rng.random(size=(n, len(box)))
    else:
        params = np.zeros((n, 0))

    if isinstance(basis, DiscreteBasis) and spatial_set is basis.points:
        emb = basis.evaluate_rows(rows, max_order)
    else:
        emb = basis.evaluate(x, max_order)
    logger.debug("built %d candidates from %s (seed=%d)", n, source, seed)
    return CandidateSet(NetQuery(x, emb, params), rows, source, box, int(seed))


def normalize_weights(omega):
    """p_i = omega_i / sum(omega); uniform when the total vanishes"""
    omega = np.asarray(omega, dtype=float)
    bad = np.flatnonzero(~np.isfinite(omega))
    if bad.size:
        raise SamplingError("non-finite importance weight", index=int(bad[0]))
    if np.any(omega < 0):
        raise SamplingError("negative importance weight", index=int(np.flatnonzero(omega < 0)[0]))
    total = omega.sum()
    if total < UNIFORM_FALLBACK:
        return ProbWeights(omega, np.full(len(omega), 1.0 / len(omega)), fallback=True)
    return ProbWeights(omega, omega / total)


def compute_weights(pde, config, theta, candidates, t, criterion='abs_rhs', wrapper=RAW):
    """Importance weights from the PDE dynamics at every candidate"""
    if criterion not in CRITERIA:
        raise ConfigurationError(f"unknown sampling criterion {criterion!r}, expected one of {CRITERIA}")
    if criterion == 'uniform':
        return normalize_weights(np.ones(candidates.n))
    q = candidates.query
    jets = wrapped_jets(config, np.asarray(theta, dtype=float), q, pde.order, wrapper)
    if criterion == 'abs_rhs':
        omega = pde.rhs(jets, q.x, q.params, t)
    else:
        if pde.advection is None:
            raise ConfigurationError(f"problem {pde.name} has no advective term")
        omega = pde.advection(jets, q.x, q.params, t)
    omega = np.abs(np.broadcast_to(value_of(omega), (q.n,)))
    return normalize_weights(omega)


class AliasTable:
    """Vose alias table: O(n) construction, O(1) per draw"""

    def __init__(self, p):
        p = np.asarray(p, dtype=float)
        n = len(p)
        scaled = p * n / p.sum()
        prob = np.zeros(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            l = small.pop()
            g = large.pop()
            prob[l] = scaled[l]
            alias[l] = g
            scaled[g] -= 1.0 - scaled[l]
            if scaled[g] < 1.0:
                small.append(g)
            else:
                large.append(g)
        for g in large:
            prob[g] = 1.0
        for l in small:
            prob[l] = 1.0
        # zero-probability entries must never be returned
        best = int(np.argmax(p))
        zero = p == 0
        prob[zero] = 0.0
        alias[zero & (p[alias] == 0)] = best
        self.prob = prob
        self.alias = alias

    def draw(self, size, rng):
        idx = rng.integers(0, len(self.prob), size=size)
        coin = rng.random(size=size)
        return np.where(coin < self.prob[idx], idx, self.alias[idx])


def draw_batch(weights, candidates, n_c, rng):
    """n_c draws with replacement; the batch reuses the candidates' embedding tables"""
    if n_c < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {n_c}")
    rows = AliasTable(weights.p).draw(n_c, rng)
    return candidates.query.take(rows)


class ActiveSampler:
    """Callable (theta, t) -> batch, refreshed once per time step"""

    def __init__(self, pde, config, wrapper, candidates, n_c, criterion='abs_rhs', seed=0):
        self.pde = pde
        self.config = config
        self.wrapper = wrapper
        self.candidates = candidates
        self.n_c = n_c
        self.criterion = criterion
        self.rng = np.random.default_rng(seed)

    def __call__(self, theta, t):
        weights = compute_weights(self.pde, self.config, theta, self.candidates, t, self.criterion, self.wrapper)
        if weights.fallback:
            logger.debug("all weights vanish at t=%.6g, sampling uniformly", t)
        return draw_batch(weights, self.candidates, self.n_c, self.rng)
