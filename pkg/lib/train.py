"""
ADAM fitting of the network: initial-condition fits and the static residual demo.

Losses are built from the same jets as the time integration and
differentiated in reverse mode (lib.autodiff.Var).
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from lib.autodiff import Var
from lib.errors import ConfigurationError
from lib.network import RAW, WrapperKind, init_params, wrapped_jets

logger = logging.getLogger(__name__)

FULL_BATCH_LIMIT = 10000
DEFAULT_BATCH = 1024


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 1000
    batch_size: int = None      # None: full batch up to FULL_BATCH_LIMIT points, else DEFAULT_BATCH
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigurationError(f"ADAM betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigurationError("ADAM learning rate and epsilon must be positive")
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class FitReport:
    losses: np.ndarray
    final_loss: float
    wall_time: float
    iterations: int
    rms_misfit: float
    aborted: bool = False
    notes: dict = field(default_factory=dict)


def adam_step(theta, grad, moments, cfg, iteration):
    """
    One bias-corrected ADAM update

    Args:
        moments: (m, v) from the previous step, or None at the first step
        iteration: 1-based step counter

    Returns:
        (theta', (m', v'))
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if moments is None:
        moments = (np.zeros_like(theta), np.zeros_like(theta))
    m, v = moments
    m = cfg.beta1 * m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** iteration)
    v_hat = v / (1 - cfg.beta2 ** iteration)
    return theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps), (m, v)


def _mse(r):
    return (r * r).sum() / r.shape[0]


def fit_loss(config, theta, query, target, wrapper=RAW):
    """Mean-squared misfit of the wrapped network to target values and its theta-gradient"""
    leaf = Var(np.asarray(theta, dtype=float))
    out = wrapped_jets(config, leaf, query, 0, wrapper)[()]
    loss = _mse(out - np.asarray(target, dtype=float))
    loss.backward()
    return float(loss.value), _grad(leaf, config)


def bc_loss(config, theta, bc_query, wrapper=RAW):
    """Mean-squared output on boundary points (homogeneous Dirichlet data)"""
    u = wrapped_jets(config, np.asarray(theta, dtype=float), bc_query, 0, wrapper)[()]
    return float(np.mean(np.asarray(u) ** 2))


def static_loss(config, theta, problem, query, bc_query=None, bc_weight=1.0, wrapper=RAW):
    """Mean-squared PDE residual (+ weighted boundary loss) and its theta-gradient"""
    leaf = Var(np.asarray(theta, dtype=float))
    jets = wrapped_jets(config, leaf, query, problem.order, wrapper)
    loss = _mse(problem.residual(jets, query.x))
    if bc_query is not None and bc_weight > 0:
        u_bc = wrapped_jets(config, leaf, bc_query, 0, wrapper)[()]
        loss = loss + bc_weight * _mse(u_bc)
    loss.backward()
    return float(loss.value), _grad(leaf, config)


def _grad(leaf, config):
    return leaf.grad if leaf.grad is not None else np.zeros(config.n_params)


def _batches(n, cfg):
    """Deterministic batch index stream: full batch or reshuffled mini-batches"""
    size = cfg.batch_size or (n if n <= FULL_BATCH_LIMIT else DEFAULT_BATCH)
    if size >= n:
        while True:
            yield None
    rng = np.random.default_rng(cfg.seed)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield perm[start:start + size]


def _optimize(loss_fn, theta, n_points, cfg, progress, desc):
    start = time.time()
    losses = []
    moments = None
    last_finite = theta.copy()
    aborted = False
    batches = _batches(n_points, cfg)
    bar = tqdm(range(1, cfg.iterations + 1), disable=not progress, desc=desc)
    for it in bar:
        loss, grad = loss_fn(theta, next(batches))
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            logger.warning("non-finite loss at iteration %d, keeping last finite parameters", it)
            aborted = True
            theta = last_finite
            break
        losses.append(loss)
        last_finite = theta
        theta, moments = adam_step(theta, grad, moments, cfg, it)
        if progress and it % 100 == 0:
            bar.set_postfix(loss=f"{loss:.3e}")
    return theta, np.array(losses), time.time() - start, aborted


def fit_initial(config, u0, query, cfg, wrapper=RAW, theta=None, progress=False):
    """
    Fit the wrapped network to the initial condition at the query points

    Args:
        config: MlpConfig
        u0: values at the query points, or callable (x, params) -> values
        query: NetQuery of fitting points (spatial x parameters)
        cfg: AdamConfig
        theta: starting parameters (Glorot init from cfg.seed when None)

    Returns:
        (theta0, FitReport)
    """
    if wrapper.kind == WrapperKind.TRAIN_FREE:
        raise ConfigurationError("the training-free wrapper reproduces u0 exactly; fitting it is not allowed")
    target = np.asarray(u0(query.x, query.params) if callable(u0) else u0, dtype=float).reshape(-1)
    if target.shape != (query.n,):
        raise ConfigurationError(f"u0 has {target.size} values for {query.n} fitting points")
    theta = init_params(config, cfg.seed) if theta is None else np.array(theta, dtype=float)

    def loss_fn(th, rows):
        if rows is None:
            return fit_loss(config, th, query, target, wrapper)
        return fit_loss(config, th, query.take(rows), target[rows], wrapper)

    theta, losses, wall, aborted = _optimize(loss_fn, theta, query.n, cfg, progress, "fit u0")
    final, _ = fit_loss(config, theta, query, target, wrapper)
    logger.info("initial fit %s: loss %.3e after %d iterations (%.1fs)", config.label, final, len(losses), wall)
    return theta, FitReport(losses, final, wall, len(losses), float(np.sqrt(final)), aborted)


def fit_static_residual(config, problem, query, cfg, bc_query=None, bc_weight=1.0, wrapper=RAW, theta=None,
                        progress=False):
    """
    Minimize the static PDE residual at the query points

    Args:
        problem: StaticProblem (residual(jets, x))
        bc_query: boundary points for the boundary loss; None when the embedding makes the BC exact
        bc_weight: weight of the boundary loss
    """
    theta = init_params(config, cfg.seed) if theta is None else np.array(theta, dtype=float)

    def loss_fn(th, rows):
        q = query if rows is None else query.take(rows)
        return static_loss(config, th, problem, q, bc_query, bc_weight, wrapper)

    theta, losses, wall, aborted = _optimize(loss_fn, theta, query.n, cfg, progress, "fit residual")
    final, _ = static_loss(config, theta, problem, query, bc_query, bc_weight, wrapper)
    logger.info("static fit %s: loss %.3e after %d iterations (%.1fs)", config.label, final, len(losses), wall)
    return theta, FitReport(losses, final, wall, len(losses), float(np.sqrt(final)), aborted)
