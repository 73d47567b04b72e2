"""
Parameter-update equation: min ||J gamma - f|| solved matrix-free with LSMR.

J is the parameter Jacobian of the wrapped network at the collocation points,
f the PDE right-hand side there. Operators are scipy LinearOperators built
from the network's JVP / VJP, so J^T J is never formed.
"""

import logging
import warnings
from dataclasses import dataclass, field
from math import sqrt
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from lib.autodiff import Dual, Var, value_of
from lib.errors import ConfigurationError, RhsError
from lib.network import RAW, forward, jacobian_ops, wrapped_jets

logger = logging.getLogger(__name__)

STOP_REASONS = {0: 'btol', 1: 'btol', 2: 'atol', 3: 'conlim', 4: 'btol', 5: 'atol', 6: 'conlim', 7: 'max_iters'}


@dataclass(frozen=True)
class LsmrOptions:
    atol: float = 5e-5
    btol: float = 5e-5
    conlim: float = 1e8
    max_iters: Optional[int] = None      # None -> 4 * n_theta

    def __post_init__(self):
        if not (self.atol > 0 and self.btol > 0 and self.conlim > 0):
            raise ConfigurationError("LSMR tolerances must be positive")


@dataclass
class UpdateResult:
    gamma: np.ndarray
    iterations: int
    residual: float          # ||J^T (J gamma - f)||
    stop_reason: str
    residual_norm: float = 0.0   # ||J gamma - f||


# --------------------------------------------------------------------------
# LSMR
# --------------------------------------------------------------------------

def _sym_ortho(a, b):
    """Stable Givens rotation: returns (c, s, r) with [c s; -s c] [a; b] = [r; 0]"""
    if b == 0:
        return np.sign(a), 0.0, abs(a)
    if a == 0:
        return 0.0, np.sign(b), abs(b)
    if abs(b) > abs(a):
        tau = a / b
        s = np.sign(b) / sqrt(1 + tau * tau)
        c = s * tau
        r = b / s
    else:
        tau = b / a
        c = np.sign(a) / sqrt(1 + tau * tau)
        s = c * tau
        r = a / c
    return c, s, r


def lsmr(A, b, atol=5e-5, btol=5e-5, conlim=1e8, maxiter=None, callback=None):
    """
    LSMR for min ||A x - b|| (Golub-Kahan bidiagonalization, MINRES on the normal equations)

    Args:
        A: LinearOperator (m, n) with matvec / rmatvec
        b: right-hand side (m,)
        callback: optional callback(itn, x, normar) after every iteration

    Returns:
        (x, istop, itn, normr, normar, normA, condA, normx)
    """
    A = aslinearoperator(A)
    b = np.asarray(b, dtype=float).reshape(-1)
    m, n = A.shape
    if maxiter is None:
        maxiter = min(m, n)

    u = b.copy()
    normb = np.linalg.norm(b)
    beta = normb
    x = np.zeros(n)
    if beta > 0:
        u = u / beta
        v = A.rmatvec(u).reshape(-1)
        alpha = np.linalg.norm(v)
    else:
        v = np.zeros(n)
        alpha = 0.0
    if alpha > 0:
        v = v / alpha

    itn = 0
    zetabar = alpha * beta
    alphabar = alpha
    rho = rhobar = cbar = 1.0
    sbar = 0.0
    h = v.copy()
    hbar = np.zeros(n)

    betadd = beta
    betad = 0.0
    rhodold = 1.0
    tautildeold = 0.0
    thetatilde = 0.0
    zeta = 0.0
    d = 0.0

    normA2 = alpha * alpha
    maxrbar, minrbar = 0.0, 1e100
    normA = sqrt(normA2)
    condA = 1.0
    normx = 0.0
    istop = 0
    normr = beta
    normar = alpha * beta
    ctol = 1.0 / conlim if conlim > 0 else 0.0

    if normar == 0:
        return x, istop, itn, normr, normar, normA, condA, normx

    while itn < maxiter:
        itn += 1

        # bidiagonalization step
        u = A.matvec(v).reshape(-1) - alpha * u
        beta = np.linalg.norm(u)
        if beta > 0:
            u = u / beta
            v = A.rmatvec(u).reshape(-1) - beta * v
            alpha = np.linalg.norm(v)
            if alpha > 0:
                v = v / alpha

        # rotations (damp = 0)
        chat, shat, alphahat = _sym_ortho(alphabar, 0.0)
        rhoold = rho
        c, s, rho = _sym_ortho(alphahat, beta)
        thetanew = s * alpha
        alphabar = c * alpha

        rhobarold = rhobar
        zetaold = zeta
        thetabar = sbar * rho
        rhotemp = cbar * rho
        cbar, sbar, rhobar = _sym_ortho(cbar * rho, thetanew)
        zeta = cbar * zetabar
        zetabar = -sbar * zetabar

        # update h, hbar, x
        hbar = h - (thetabar * rho / (rhoold * rhobarold)) * hbar
        x = x + (zeta / (rho * rhobar)) * hbar
        h = v - (thetanew / rho) * h

        # estimate ||r||
        betaacute = chat * betadd
        betacheck = -shat * betadd
        betahat = c * betaacute
        betadd = -s * betaacute

        thetatildeold = thetatilde
        ctildeold, stildeold, rhotildeold = _sym_ortho(rhodold, thetabar)
        thetatilde = stildeold * rhobar
        rhodold = ctildeold * rhobar
        betad = -stildeold * betad + ctildeold * betahat

        tautildeold = (zetaold - thetatildeold * tautildeold) / rhotildeold
        taud = (zeta - thetatilde * tautildeold) / rhodold
        d = d + betacheck * betacheck
        normr = sqrt(d + (betad - taud) ** 2 + betadd * betadd)

        # estimate ||A|| and cond(A)
        normA2 = normA2 + beta * beta
        normA = sqrt(normA2)
        normA2 = normA2 + alpha * alpha
        maxrbar = max(maxrbar, rhobarold)
        if itn > 1:
            minrbar = min(minrbar, rhobarold)
        condA = max(maxrbar, rhotemp) / min(minrbar, rhotemp)

        normar = abs(zetabar)
        normx = np.linalg.norm(x)

        if callback is not None:
            callback(itn, x, normar)

        # convergence tests
        test1 = normr / normb
        test2 = normar / (normA * normr) if (normA * normr) != 0 else np.inf
        test3 = 1.0 / condA
        t1 = test1 / (1 + normA * normx / normb)
        rtol = btol + atol * normA * normx / normb

        if itn >= maxiter:
            istop = 7
        if 1 + test3 <= 1:
            istop = 6
        if 1 + test2 <= 1:
            istop = 5
        if 1 + t1 <= 1:
            istop = 4
        if test3 <= ctol:
            istop = 3
        if test2 <= atol:
            istop = 2
        if test1 <= rtol:
            istop = 1
        if istop > 0:
            break

    return x, istop, itn, normr, normar, normA, condA, normx


def solve_update(jac_ops, f, opts=None, callback=None):
    """
    Minimum-norm least-squares solution of J gamma = f

    Args:
        jac_ops: LinearOperator (n_batch, n_theta)
        f: right-hand side at the collocation points
        opts: LsmrOptions

    Returns:
        UpdateResult; a 'max_iters' stop still returns the last iterate
    """
    opts = opts or LsmrOptions()
    n_theta = jac_ops.shape[1]
    max_iters = opts.max_iters if opts.max_iters is not None else 4 * n_theta
    x, istop, itn, normr, normar, *_ = lsmr(jac_ops, f, atol=opts.atol, btol=opts.btol,
                                            conlim=opts.conlim, maxiter=max_iters, callback=callback)
    reason = STOP_REASONS[istop]
    if reason == 'max_iters':
        msg = f"LSMR hit max_iters={max_iters} (||J^T r||={normar:.3e})"
        logger.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    logger.debug("LSMR: %d iterations, stop=%s, ||r||=%.3e, ||J^T r||=%.3e", itn, reason, normr, normar)
    return UpdateResult(x, itn, float(normar), reason, float(normr))


# --------------------------------------------------------------------------
# Right-hand side and its Jacobian
# --------------------------------------------------------------------------

def rhs_generic(pde, config, theta, batch, t, wrapper=RAW):
    """PDE right-hand side at the batch points; theta may be ndarray, Var or Dual"""
    jets = wrapped_jets(config, theta, batch, pde.order, wrapper)
    return pde.rhs(jets, batch.x, batch.params, t)


def assemble_rhs(pde, config, theta, batch, t, wrapper=RAW):
    """
    (f)_i = f(u(x~_i; theta), t, x~_i)

    Raises:
        RhsError: carrying the first offending point index when an entry is NaN / Inf
    """
    f = np.asarray(value_of(rhs_generic(pde, config, np.asarray(theta, dtype=float), batch, t, wrapper)), dtype=float)
    f = np.broadcast_to(f, (batch.n,)).copy()
    bad = np.flatnonzero(~np.isfinite(f))
    if bad.size:
        raise RhsError(f"non-finite right-hand side ({pde.name}, t={t:.6g})", index=int(bad[0]))
    return f


def shifted_ops(jac_ops, jf_ops, h, rb_gamma):
    """v -> (J_u - h rb_gamma J_f) v and its transpose"""
    shift = h * rb_gamma
    if shift == 0:
        return jac_ops
    return aslinearoperator(jac_ops) - shift * aslinearoperator(jf_ops)


def default_fd_step(theta):
    return 1e-6 * (1.0 + np.linalg.norm(theta))


def fd_directional(f, theta, gamma, eps=None):
    """Central difference (f(theta + eps g) - f(theta - eps g)) / 2 eps * ||gamma||, g = gamma / ||gamma||"""
    theta = np.asarray(theta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    norm = np.linalg.norm(gamma)
    if norm == 0:
        return np.zeros_like(np.asarray(f(theta), dtype=float))
    eps = default_fd_step(theta) if eps is None else eps
    g = gamma / norm
    return (np.asarray(f(theta + eps * g)) - np.asarray(f(theta - eps * g))) / (2.0 * eps) * norm


def jf_action(pde, config, theta, batch, t, gamma, eps=None, wrapper=RAW):
    """Finite-difference J_f gamma with J_f = d f(u(theta)) / d theta"""
    return fd_directional(lambda th: assemble_rhs(pde, config, th, batch, t, wrapper), theta, gamma, eps)


def jf_exact_ops(pde, config, theta, batch, t, wrapper=RAW):
    """Exact J_f / J_f^T actions (forward and reverse mode through the RHS)"""
    theta = np.asarray(theta, dtype=float)
    leaf = Var(theta)
    out = rhs_generic(pde, config, leaf, batch, t, wrapper)

    def matvec(g):
        res = rhs_generic(pde, config, Dual(theta, np.asarray(g, dtype=float).reshape(-1)), batch, t, wrapper)
        return np.broadcast_to(res.tangent, (batch.n,)).copy() if isinstance(res, Dual) else np.zeros(batch.n)

    def rmatvec(v):
        if not isinstance(out, Var):
            return np.zeros(config.n_params)
        out.backward(np.asarray(v, dtype=float).reshape(-1))
        return leaf.grad.copy() if leaf.grad is not None else np.zeros(config.n_params)

    return LinearOperator((batch.n, config.n_params), matvec=matvec, rmatvec=rmatvec, dtype=float)


@dataclass
class EdnnSystem:
    """
    Network + wrapper + PDE + collocation batch, seen as a system in theta.

    The integrators only use this interface:
    values(theta), rhs(theta, t), jacobian(theta), rhs_jacobian(theta, t), rhs_jvp(theta, t, gamma).
    """
    pde: object
    config: object
    batch: object
    wrapper: object = RAW
    fd_eps: Optional[float] = None
    jf_mode: str = 'fd'             # explicit J_f terms: 'fd' or 'exact'
    evaluations: dict = field(default_factory=lambda: {'rhs': 0, 'jacobian': 0})

    @property
    def n_params(self):
        return self.config.n_params

    @property
    def n_points(self):
        return self.batch.n

    def values(self, theta):
        return forward(self.config, theta, self.batch, self.wrapper)

    def rhs(self, theta, t):
        self.evaluations['rhs'] += 1
        return assemble_rhs(self.pde, self.config, theta, self.batch, t, self.wrapper)

    def jacobian(self, theta):
        self.evaluations['jacobian'] += 1
        return jacobian_ops(self.config, theta, self.batch, self.wrapper)

    def rhs_jacobian(self, theta, t):
        return jf_exact_ops(self.pde, self.config, theta, self.batch, t, self.wrapper)

    def rhs_jvp(self, theta, t, gamma):
        if self.jf_mode == 'exact':
            return self.rhs_jacobian(theta, t).matvec(gamma)
        return jf_action(self.pde, self.config, theta, self.batch, t, gamma, self.fd_eps, self.wrapper)

    def with_batch(self, batch):
        return EdnnSystem(self.pde, self.config, batch, self.wrapper, self.fd_eps, self.jf_mode, self.evaluations)
