"""
Feed-forward network with an embedding input layer.

The network input is v = [Phi(x), alpha]. Spatial derivatives of the output
are propagated through the layers as jets: dicts keyed by the derivative
multi-index (() value, (l,) first, (l, k) second with l <= k, (0, 0, 0) third
in 1D). The input jets come from the embedding tables, so the chain rule
through Phi is exact. The same jet code runs on ndarray, Var (reverse mode)
and Dual (forward mode), which gives parameter JVPs / VJPs of the wrapped
output and of anything built from its derivatives (PDE right-hand sides).
"""

import logging
import pickle
import weakref
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator

from lib.autodiff import Dual, Var, tanh, value_of
from lib.embedding import EmbeddingEval
from lib.errors import CapabilityError, ConfigurationError, FormatError, ShapeError

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Configuration and parameter layout
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    """Layer widths [n_in, n_h1, ..., n_out]; tanh hidden layers, linear last layer without bias"""
    widths: tuple
    activation: str = 'tanh'

    def __post_init__(self):
        object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ConfigurationError(f"invalid layer widths {self.widths}")
        if self.activation != 'tanh':
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @classmethod
    def parse(cls, spec, n_in, n_out=1):
        """'4x10' -> four hidden layers of ten units"""
        try:
            depth, width = (int(s) for s in str(spec).lower().split('x'))
        except ValueError:
            raise ConfigurationError(f"network spec must look like '4x10', got {spec!r}")
        return cls((n_in,) + (width,) * depth + (n_out,))

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def n_params(self):
        w = self.widths
        weights = sum(w[l] * w[l + 1] for l in range(self.n_layers))
        biases = sum(w[l + 1] for l in range(self.n_layers - 1))
        return weights + biases

    @property
    def label(self):
        hidden = self.widths[1:-1]
        return f"{len(hidden)}x{hidden[0]}" if hidden and len(set(hidden)) == 1 else 'x'.join(map(str, self.widths))


def unflatten(config, theta):
    """Split a flat parameter vector into [(W0, b0), (W1, b1), ..., (WL, None)]"""
    if len(theta) != config.n_params:
        raise ShapeError(f"parameter vector has length {len(theta)}, network needs {config.n_params}")
    layers, offset = [], 0
    w = config.widths
    for l in range(config.n_layers):
        n_out, n_in = w[l + 1], w[l]
        W = theta[offset:offset + n_out * n_in].reshape(n_out, n_in)
        offset += n_out * n_in
        b = None
        if l < config.n_layers - 1:
            b = theta[offset:offset + n_out]
            offset += n_out
        layers.append((W, b))
    return layers


def flatten(layers):
    parts = []
    for W, b in layers:
        parts.append(np.asarray(W, dtype=float).ravel())
        if b is not None:
            parts.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(parts)


def init_params(config, seed):
    """Glorot-uniform weights, zero biases; deterministic per seed"""
    rng = np.random.default_rng(seed)
    layers = []
    w = config.widths
    for l in range(config.n_layers):
        fan_in, fan_out = w[l], w[l + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = np.zeros(fan_out) if l < config.n_layers - 1 else None
        layers.append((W, b))
    return flatten(layers)


# --------------------------------------------------------------------------
# Queries
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NetQuery:
    """Spatio-parametric query points x~ = [x, alpha] with their embedding evaluations"""
    x: np.ndarray
    embedding: EmbeddingEval
    params: np.ndarray

    @classmethod
    def build(cls, basis, x, params=None, max_order=2):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if basis.dim == 1 else x.reshape(1, -1)
        n = x.shape[0]
        params = np.zeros((n, 0)) if params is None else np.asarray(params, dtype=float).reshape(n, -1)
        return cls(x, basis.evaluate(x, max_order), params)

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def n_inputs(self):
        return self.embedding.phi.shape[1] + self.params.shape[1]

    def take(self, rows):
        return NetQuery(self.x[rows], self.embedding.take(rows), self.params[rows])


def derivative_keys(dim, max_order):
    keys = [()]
    if max_order >= 1:
        keys += [(l,) for l in range(dim)]
    if max_order >= 2:
        keys += [(l, k) for l in range(dim) for k in range(l, dim)]
    if max_order >= 3:
        keys += [(0, 0, 0)]
    return keys


def jet_key(*idx):
    """Normalize a derivative multi-index, e.g. jet_key(1, 0) -> (0, 1)"""
    return tuple(sorted(idx))


def input_jets(query, max_order):
    """Jets of the network input v = [Phi, alpha] with respect to x"""
    emb = query.embedding
    if emb.max_order < max_order:
        raise CapabilityError(f"embedding data carries derivatives up to order {emb.max_order}, "
                              f"{max_order} requested")
    if max_order >= 3 and query.dim != 1:
        raise CapabilityError("third derivatives are only available in 1D")
    n, p = query.n, query.params.shape[1]
    zeros = np.zeros((n, p))
    jets = {(): np.concatenate([emb.phi, query.params], axis=1)}
    for key in derivative_keys(query.dim, max_order)[1:]:
        if len(key) == 1:
            block = emb.grad[:, :, key[0]]
        elif len(key) == 2:
            block = emb.hess[:, :, key[0], key[1]]
        else:
            block = emb.third
        jets[key] = np.concatenate([block, zeros], axis=1)
    return jets


def _tanh_jets(A, keys):
    """Faa di Bruno for tanh applied to the jets of the pre-activation A"""
    s = tanh(A[()])
    Y = {(): s}
    if len(keys) == 1:
        return Y
    s1 = 1.0 - s * s
    order = max(len(k) for k in keys)
    s2 = -2.0 * s * s1 if order >= 2 else None
    s3 = -2.0 * (s1 * s1 + s * s2) if order >= 3 else None
    for key in keys[1:]:
        if len(key) == 1:
            Y[key] = s1 * A[key]
        elif len(key) == 2:
            l, k = key
            Y[key] = s2 * A[(l,)] * A[(k,)] + s1 * A[key]
        else:
            a1, a2 = A[(0,)], A[(0, 0)]
            Y[key] = s3 * a1 * a1 * a1 + 3.0 * s2 * a1 * a2 + s1 * A[key]
    return Y


def raw_jets(config, theta, jets):
    """Propagate input jets through the network; returns output jets of shape (n,)"""
    keys = list(jets.keys())
    layers = unflatten(config, theta)
    V = jets
    for l, (W, b) in enumerate(layers):
        WT = W.T
        A = {}
        for key in keys:
            A[key] = V[key] @ WT
        if b is not None:
            A[()] = A[()] + b
            V = _tanh_jets(A, keys)
        else:
            V = A
    return {key: V[key].reshape(-1) for key in keys}


# --------------------------------------------------------------------------
# Output wrappers
# --------------------------------------------------------------------------

class WrapperKind(str, Enum):
    RAW = 'raw'
    HOM_DIRICHLET = 'hom_dirichlet'
    TRAIN_FREE = 'train_free'
    LIFTED = 'lifted'


@dataclass(frozen=True, eq=False)
class TrainFree:
    """u0(x~) + w(x~; theta) - w(x~; theta0) with theta0 frozen"""
    u0_jets: Callable
    theta0: np.ndarray
    _cache: weakref.WeakKeyDictionary = field(default_factory=weakref.WeakKeyDictionary, repr=False)

    def frozen_terms(self, config, query, max_order, inner):
        """u0 jets minus w(theta0) jets; cached per query"""
        hit = self._cache.get(query)
        if hit is not None and hit[0] >= max_order:
            return hit[1]
        u0 = self.u0_jets(query.x, query.params, max_order)
        w0 = inner(config, self.theta0, query, max_order)
        terms = {key: np.asarray(u0[key], dtype=float) - w0[key] for key in w0}
        self._cache[query] = (max_order, terms)
        return terms


@dataclass(frozen=True, eq=False)
class Wrapper:
    """
    Output transform applied around the raw network.

    hom_dirichlet: subtract u(Phi=0) so that the output vanishes where Phi vanishes
    lift:          lift(x, params, max_order) -> jets added to the output
    train_free:    TrainFree data; the lift is ignored (u0 already satisfies the BCs)
    """
    hom_dirichlet: bool = False
    lift: Optional[Callable] = None
    train_free: Optional[TrainFree] = None

    @property
    def kind(self):
        if self.train_free is not None:
            return WrapperKind.TRAIN_FREE
        if self.lift is not None:
            return WrapperKind.LIFTED
        if self.hom_dirichlet:
            return WrapperKind.HOM_DIRICHLET
        return WrapperKind.RAW

    def with_train_free(self, u0_jets, theta0):
        return Wrapper(self.hom_dirichlet, self.lift, TrainFree(u0_jets, np.array(theta0, dtype=float)))


RAW = Wrapper()


def _inner_jets(hom_dirichlet):
    def inner(config, theta, query, max_order):
        jets = raw_jets(config, theta, input_jets(query, max_order))
        if hom_dirichlet:
            zero_in = {(): np.concatenate([np.zeros_like(query.embedding.phi), query.params], axis=1)}
            jets[()] = jets[()] - raw_jets(config, theta, zero_in)[()]
        return jets
    return inner


def wrapped_jets(config, theta, query, max_order=0, wrapper=RAW):
    """Jets of the wrapped network output; theta may be ndarray, Var or Dual"""
    if query.n_inputs != config.n_in:
        raise ShapeError(f"query carries {query.n_inputs} inputs, network expects {config.n_in}")
    inner = _inner_jets(wrapper.hom_dirichlet)
    jets = inner(config, theta, query, max_order)
    if wrapper.train_free is not None:
        frozen = wrapper.train_free.frozen_terms(config, query, max_order, inner)
        return {key: jets[key] + frozen[key] for key in jets}
    if wrapper.lift is not None:
        lift = wrapper.lift(query.x, query.params, max_order)
        return {key: jets[key] + lift[key] for key in jets}
    return jets


def forward(config, theta, query, wrapper=RAW):
    """Wrapped network values at every query point"""
    return value_of(wrapped_jets(config, np.asarray(theta, dtype=float), query, 0, wrapper)[()])


def spatial_derivs(config, theta, query, max_order, wrapper=RAW):
    """
    Output value and spatial derivatives up to max_order

    Returns:
        dict keyed by derivative multi-index: () u, (l,) du/dx_l,
        (l, k) d2u/dx_l dx_k with l <= k, (0, 0, 0) d3u/dx3 (1D)
    """
    jets = wrapped_jets(config, np.asarray(theta, dtype=float), query, max_order, wrapper)
    return {key: value_of(v) for key, v in jets.items()}


def jvp(config, theta, query, gamma, wrapper=RAW):
    """J gamma, J = d u(x~_i; theta) / d theta"""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (config.n_params,):
        raise ShapeError(f"direction has shape {gamma.shape}, expected ({config.n_params},)")
    out = wrapped_jets(config, Dual(theta, gamma), query, 0, wrapper)[()]
    return np.array(out.tangent)


def vjp(config, theta, query, v, wrapper=RAW):
    """J^T v"""
    v = np.asarray(v, dtype=float)
    if v.shape != (query.n,):
        raise ShapeError(f"cotangent has shape {v.shape}, expected ({query.n},)")
    leaf = Var(np.asarray(theta, dtype=float))
    out = wrapped_jets(config, leaf, query, 0, wrapper)[()]
    out.backward(v)
    return leaf.grad if leaf.grad is not None else np.zeros(config.n_params)


def jacobian_ops(config, theta, query, wrapper=RAW):
    """
    Matrix-free parameter Jacobian at fixed (theta, query)

    The reverse-mode graph is built once and reused by every rmatvec.
    """
    theta = np.asarray(theta, dtype=float)
    leaf = Var(theta)
    out = wrapped_jets(config, leaf, query, 0, wrapper)[()]

    def matvec(g):
        return jvp(config, theta, query, np.asarray(g, dtype=float).reshape(-1), wrapper)

    def rmatvec(v):
        out.backward(np.asarray(v, dtype=float).reshape(-1))
        return leaf.grad.copy() if leaf.grad is not None else np.zeros(config.n_params)

    return LinearOperator((query.n, config.n_params), matvec=matvec, rmatvec=rmatvec, dtype=float)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, config, theta, seed, t=0.0):
    state = {
        'widths': list(config.widths),
        'seed': int(seed),
        'theta': np.asarray(theta, dtype=float),
        't': float(t),
    }
    with open(path, 'wb') as f:
        pickle.dump(state, f)
    logger.debug("checkpoint t=%.6g -> %s", t, path)


def load_checkpoint(path):
    """Returns (MlpConfig, theta, seed, t)"""
    try:
        with open(path, 'rb') as f:
            state = pickle.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"checkpoint not found: {path}")
    except (pickle.UnpicklingError, EOFError) as e:
        raise FormatError(f"{path}: unreadable checkpoint ({e})", field='checkpoint')
    for key in ('widths', 'seed', 'theta', 't'):
        if key not in state:
            raise FormatError(f"{path}: checkpoint lacks '{key}'", field=key)
    config = MlpConfig(tuple(state['widths']))
    theta = np.asarray(state['theta'], dtype=float)
    if theta.shape != (config.n_params,):
        raise FormatError(f"{path}: theta has shape {theta.shape}, widths need {config.n_params}", field='theta')
    return config, theta, state['seed'], state['t']
