"""
Time integration of the network parameters.

Every stepper advances theta by solving the parameter-update equation at its
stages (see lib.update). Supported:
- Euler            fixed step, one solve per step
- Tsit5 / Tsit5Fixed   7-stage FSAL 5(4) pair of Tsitouras, PI step control
- Rosenbrock23 / Rosenbrock23Fixed   linearly implicit 2(3) triple with the
                   shifted operator (J_u - h gamma J_f)

Steppers operate on any "system" exposing values / rhs / jacobian /
rhs_jacobian / rhs_jvp (lib.update.EdnnSystem or a test system).
"""

import logging
import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from math import sqrt
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from lib.errors import ConfigurationError, EdnnError, RhsError, StepRejected
from lib.network import load_checkpoint, save_checkpoint
from lib.update import LsmrOptions, shifted_ops, solve_update

logger = logging.getLogger(__name__)

RB_GAMMA = 1.0 / (2.0 + sqrt(2.0))
E32 = 6.0 + sqrt(2.0)

# Tsitouras 5(4): c nodes, a rows, b weights, b - b_hat error weights
TSIT5_C = [0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0]
TSIT5_A = {
    1: [0.161],
    2: [-0.008480655492356989, 0.335480655492357],
    3: [2.897153057105493, -6.359448489975075, 4.3622954328695815],
    4: [5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525],
    5: [5.86145544294642, -12.92096931784711, 8.159367898576159, -0.071584973281401, -0.028269050394068383],
    6: [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742, -3.290069515436081, 2.324710524099774],
}
TSIT5_B = [0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
           -3.290069515436081, 2.324710524099774, 0.0]
TSIT5_E = [-0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995, -0.1447110071732629,
           0.5823571654525552, -0.45808210592918697, 0.015151515151515152]

MAX_CONSECUTIVE_REJECTIONS = 20


class StepperKind(str, Enum):
    EULER = 'euler'
    TSIT5 = 'tsit5'
    TSIT5_FIXED = 'tsit5_fixed'
    ROSENBROCK23 = 'rosenbrock23'
    ROSENBROCK23_FIXED = 'rosenbrock23_fixed'


@dataclass(frozen=True)
class StepperSpec:
    """h is the fixed step, or the initial step for adaptive steppers"""
    kind: StepperKind = StepperKind.ROSENBROCK23_FIXED
    h: float = 1e-2
    rtol: Optional[float] = None
    atol: float = 1e-6
    h_min: float = 1e-12
    h_max: float = np.inf
    lsmr: LsmrOptions = field(default_factory=LsmrOptions)
    max_rejections: int = MAX_CONSECUTIVE_REJECTIONS

    def __post_init__(self):
        object.__setattr__(self, 'kind', StepperKind(self.kind))
        if not self.h > 0:
            raise ConfigurationError(f"step size must be positive, got {self.h}")
        if self.rtol is None:
            object.__setattr__(self, 'rtol', 1e-5 if self.kind == StepperKind.TSIT5 else 1e-4)
        if not (self.rtol > 0 and self.atol > 0):
            raise ConfigurationError("integrator tolerances must be positive")

    @property
    def adaptive(self):
        return self.kind in (StepperKind.TSIT5, StepperKind.ROSENBROCK23)

    @property
    def order(self):
        return {StepperKind.EULER: 1, StepperKind.TSIT5: 5, StepperKind.TSIT5_FIXED: 5,
                StepperKind.ROSENBROCK23: 2, StepperKind.ROSENBROCK23_FIXED: 2}[self.kind]

    @property
    def label(self):
        return f"{self.kind.value}(h={self.h:g})"


@dataclass
class SolverState:
    t: float
    theta: np.ndarray
    h: float
    accepted: int = 0
    rejected: int = 0
    lsmr_iters: int = 0
    err_prev: float = 1.0
    consecutive_rejections: int = 0
    last_err: Optional[float] = None
    last_u_err: Optional[float] = None
    last_lsmr: int = 0
    fsal: Optional[tuple] = None

    @property
    def attempts(self):
        return self.accepted + self.rejected


# --------------------------------------------------------------------------
# Step-size control
# --------------------------------------------------------------------------

def error_norm(eps, theta0, theta1, atol, rtol):
    """Weighted RMS of eps against atol + rtol * max(|theta0|, |theta1|)"""
    scale = atol + rtol * np.maximum(np.abs(theta0), np.abs(theta1))
    return float(np.sqrt(np.mean((np.asarray(eps) / scale) ** 2)))


def pi_control(err_norm, order, h, err_prev=1.0, h_min=0.0, h_max=np.inf):
    """
    PI(0.7, 0.4) controller

    Returns:
        (accept, h_new) with h_new = h * clamp(0.9 err^(-0.7/order) err_prev^(0.4/order), 0.2, 5)
    """
    accept = bool(err_norm <= 1.0)
    if not np.isfinite(err_norm):
        factor = 0.2
    else:
        err = max(err_norm, 1e-10)
        factor = 0.9 * err ** (-0.7 / order) * max(err_prev, 1e-10) ** (0.4 / order)
        factor = min(max(factor, 0.2), 5.0)
    if not accept:
        factor = min(factor, 1.0)
    return accept, float(min(max(h * factor, h_min), h_max))


# --------------------------------------------------------------------------
# Single steps: each returns (theta_new, eps or None, lsmr iterations, u-space proxy)
# --------------------------------------------------------------------------

def _solve(ops, f, spec):
    res = solve_update(ops, f, spec.lsmr)
    return res.gamma, res.iterations


def euler_increment(system, theta, t, h, spec):
    J = system.jacobian(theta)
    gamma, iters = _solve(J, system.rhs(theta, t), spec)
    return theta + h * gamma, None, iters, None


def tsit5_increment(system, theta, t, h, spec, embedded=True, fsal=None):
    gammas, iters = [], 0
    J0 = None
    for i in range(7):
        if i == 6 and not embedded:
            break
        if i == 0 and fsal is not None:
            gammas.append(fsal)
            continue
        theta_loc = theta + h * sum(a * g for a, g in zip(TSIT5_A[i], gammas)) if i > 0 else theta
        J = system.jacobian(theta_loc)
        if i == 0:
            J0 = J
        g, it = _solve(J, system.rhs(theta_loc, t + TSIT5_C[i] * h), spec)
        gammas.append(g)
        iters += it
    theta_new = theta + h * sum(b * g for b, g in zip(TSIT5_B, gammas))
    if not embedded:
        return theta_new, None, iters, None
    eps = h * sum(e * g for e, g in zip(TSIT5_E, gammas))
    if J0 is None:
        J0 = system.jacobian(theta)
    u_err = float(np.sqrt(np.mean(J0.matvec(eps) ** 2)))
    return theta_new, eps, iters, u_err, gammas[6]


def rosenbrock_increment(system, theta, t, h, spec, embedded=True):
    """
    Linearly implicit 2(3) step; J_f is frozen at (theta, t), J_u is re-linearized per stage
    """
    Jf = system.rhs_jacobian(theta, t)
    Ju1 = system.jacobian(theta)
    f0 = system.rhs(theta, t)
    k1, it1 = _solve(shifted_ops(Ju1, Jf, h, RB_GAMMA), f0, spec)

    theta_half = theta + 0.5 * h * k1
    f1 = system.rhs(theta_half, t + 0.5 * h)
    Ju2 = system.jacobian(theta_half)
    rhs2 = f1 - h * RB_GAMMA * system.rhs_jvp(theta, t, k1)
    k2, it2 = _solve(shifted_ops(Ju2, Jf, h, RB_GAMMA), rhs2, spec)
    theta_new = theta + h * k2
    if not embedded:
        return theta_new, None, it1 + it2, None

    f2 = system.rhs(theta_new, t + h)
    Ju3 = system.jacobian(theta_new)
    rhs3 = f2 - E32 * (Ju2.matvec(k2) - f1) - 2.0 * (Ju1.matvec(k1) - f0)
    k3, it3 = _solve(shifted_ops(Ju3, Jf, h, RB_GAMMA), rhs3, spec)
    eps = (h / 6.0) * (k1 - 2.0 * k2 + k3)
    u_err = float(np.sqrt(np.mean(Ju1.matvec(eps) ** 2)))
    return theta_new, eps, it1 + it2 + it3, u_err


def _advance(state, theta_new, h, iters, err=None, u_err=None, h_next=None, fsal=None):
    return replace(state, t=state.t + h, theta=theta_new, h=state.h if h_next is None else h_next,
                   accepted=state.accepted + 1, lsmr_iters=state.lsmr_iters + iters,
                   consecutive_rejections=0, last_err=err, last_u_err=u_err, last_lsmr=iters,
                   err_prev=max(err, 1e-4) if err is not None else state.err_prev, fsal=fsal)


def _reject(state, h_next, iters, err, spec, reason):
    n = state.consecutive_rejections + 1
    logger.warning("step rejected at t=%.6g (h=%.3e, %s)", state.t, state.h, reason)
    new = replace(state, h=h_next, rejected=state.rejected + 1, lsmr_iters=state.lsmr_iters + iters,
                  consecutive_rejections=n, last_err=err, last_lsmr=iters, fsal=None)
    if n > spec.max_rejections:
        raise StepRejected(f"{n} consecutive step rejections at t={state.t:.6g} (h={state.h:.3e}, {reason})",
                           t=state.t, h=state.h)
    if h_next < spec.h_min:
        raise StepRejected(f"step size {h_next:.3e} fell below h_min at t={state.t:.6g}", t=state.t, h=h_next)
    return new


def step_euler(state, system, spec, h=None):
    """theta' = theta + h gamma, gamma = argmin ||J gamma - f||"""
    h = state.h if h is None else h
    theta_new, _, iters, _ = euler_increment(system, state.theta, state.t, h, spec)
    return _advance(state, theta_new, h, iters)


def step_tsit5(state, system, spec, h=None):
    h = state.h if h is None else h
    if spec.kind == StepperKind.TSIT5_FIXED:
        theta_new, _, iters, _ = tsit5_increment(system, state.theta, state.t, h, spec, embedded=False)
        return _advance(state, theta_new, h, iters)
    fsal = None
    if state.fsal is not None and state.fsal[0] is system.batch and state.fsal[1] == state.t:
        fsal = state.fsal[2]
    try:
        theta_new, eps, iters, u_err, g_last = tsit5_increment(system, state.theta, state.t, h, spec, fsal=fsal)
    except RhsError as e:
        return _reject(state, 0.5 * h, 0, None, spec, str(e))
    return _control(state, system, spec, h, theta_new, eps, iters, u_err,
                    fsal=(system.batch, state.t + h, g_last))


def step_rosenbrock(state, system, spec, h=None):
    h = state.h if h is None else h
    if spec.kind == StepperKind.ROSENBROCK23_FIXED:
        theta_new, _, iters, _ = rosenbrock_increment(system, state.theta, state.t, h, spec, embedded=False)
        return _advance(state, theta_new, h, iters)
    try:
        theta_new, eps, iters, u_err = rosenbrock_increment(system, state.theta, state.t, h, spec)
    except RhsError as e:
        return _reject(state, 0.5 * h, 0, None, spec, str(e))
    return _control(state, system, spec, h, theta_new, eps, iters, u_err)


def _control(state, system, spec, h, theta_new, eps, iters, u_err, fsal=None):
    if not np.all(np.isfinite(theta_new)):
        return _reject(state, 0.5 * h, iters, np.inf, spec, 'non-finite parameters')
    err = error_norm(eps, state.theta, theta_new, spec.atol, spec.rtol)
    accept, h_next = pi_control(err, spec.order, h, state.err_prev, spec.h_min, spec.h_max)
    logger.debug("t=%.6g h=%.3e err=%.3e u_err=%.3e lsmr=%d %s",
                 state.t, h, err, u_err if u_err is not None else np.nan, iters,
                 'accepted' if accept else 'rejected')
    if accept:
        return _advance(state, theta_new, h, iters, err, u_err, h_next, fsal)
    return _reject(state, h_next, iters, err, spec, f"err={err:.3e}")


STEPPERS = {
    StepperKind.EULER: step_euler,
    StepperKind.TSIT5: step_tsit5,
    StepperKind.TSIT5_FIXED: step_tsit5,
    StepperKind.ROSENBROCK23: step_rosenbrock,
    StepperKind.ROSENBROCK23_FIXED: step_rosenbrock,
}


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------

DIAGNOSTIC_COLUMNS = ['t', 'h', 'accepted', 'err_norm', 'u_err', 'lsmr_iters', 'wall_ms']


@dataclass
class Trajectory:
    times: list
    thetas: list
    diagnostics: list = field(default_factory=list)
    status: str = 'completed'
    message: str = ''
    accepted: int = 0
    rejected: int = 0
    lsmr_iters: int = 0

    def diagnostics_frame(self):
        return pd.DataFrame(self.diagnostics, columns=DIAGNOSTIC_COLUMNS)

    @property
    def final_theta(self):
        return self.thetas[-1]

    def save(self, directory, config, seed):
        """One checkpoint per schedule time plus diagnostics.csv"""
        os.makedirs(directory, exist_ok=True)
        files = []
        for i, (t, theta) in enumerate(zip(self.times, self.thetas)):
            path = os.path.join(directory, f"theta_{i:04d}.ckpt")
            save_checkpoint(path, config, theta, seed, t)
            files.append(path)
        diag = os.path.join(directory, 'diagnostics.csv')
        self.diagnostics_frame().to_csv(diag, index=False)
        files.append(diag)
        return files

    @classmethod
    def load(cls, directory):
        paths = sorted(p for p in os.listdir(directory) if p.startswith('theta_') and p.endswith('.ckpt'))
        times, thetas = [], []
        for p in paths:
            _, theta, _, t = load_checkpoint(os.path.join(directory, p))
            times.append(t)
            thetas.append(theta)
        diag_path = os.path.join(directory, 'diagnostics.csv')
        diagnostics = []
        if os.path.exists(diag_path):
            diagnostics = pd.read_csv(diag_path).values.tolist()
        return cls(times, thetas, diagnostics)


def make_schedule(T, checkpoints=None, t0=0.0):
    """Sorted checkpoint times in (t0, T], always ending at T"""
    times = sorted({float(c) for c in (checkpoints or []) if t0 < c < T})
    if T > t0:
        times.append(float(T))
    return times


def run(system, theta0, spec, T, checkpoints=None, t0=0.0, sampler=None, progress=False):
    """
    Integrate theta from t0 to T

    Args:
        system: EdnnSystem-like object
        theta0: initial parameters (trained or training-free)
        spec: StepperSpec
        T: final time
        checkpoints: extra output times; steps are truncated to land on them exactly
        sampler: optional callable (theta, t) -> collocation batch, called once per step

    Returns:
        Trajectory with theta at t0 and at every checkpoint. On failure the
        exception carries the partial trajectory as `.trajectory`.
    """
    if T < t0:
        raise ConfigurationError(f"final time {T} precedes start time {t0}")
    step = STEPPERS[spec.kind]
    state = SolverState(t=float(t0), theta=np.array(theta0, dtype=float), h=float(min(spec.h, spec.h_max)))
    traj = Trajectory([state.t], [state.theta.copy()])
    schedule = make_schedule(T, checkpoints, t0)

    bar = tqdm(total=float(T - t0), disable=not progress, desc=spec.label, unit='t')
    try:
        for target in schedule:
            while state.t < target and not np.isclose(state.t, target, rtol=0, atol=1e-12 * max(1.0, abs(target))):
                h = min(state.h, target - state.t)
                # avoid a sliver step right before the checkpoint
                if not spec.adaptive and target - (state.t + h) < 1e-9 * spec.h:
                    h = target - state.t
                if sampler is not None:
                    system = system.with_batch(sampler(state.theta, state.t))
                t_start = time.perf_counter()
                new = step(state, system, spec, h)
                wall_ms = 1e3 * (time.perf_counter() - t_start)
                accepted = new.accepted > state.accepted
                traj.diagnostics.append([state.t, h, accepted, new.last_err, new.last_u_err, new.last_lsmr, wall_ms])
                if accepted:
                    bar.update(h)
                    if not spec.adaptive:
                        new = replace(new, h=state.h)
                state = new
            state = replace(state, t=target)
            traj.times.append(target)
            traj.thetas.append(state.theta.copy())
            logger.info("checkpoint t=%.6g (accepted=%d, rejected=%d, lsmr=%d)",
                        target, state.accepted, state.rejected, state.lsmr_iters)
    except EdnnError as e:
        traj.status, traj.message = 'aborted', str(e)
        e.trajectory = traj
        raise
    finally:
        bar.close()
        traj.accepted, traj.rejected, traj.lsmr_iters = state.accepted, state.rejected, state.lsmr_iters
    return traj
