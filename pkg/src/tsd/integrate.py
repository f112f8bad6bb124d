"""High-accuracy trajectory integration, section-crossing events and
finite-time Lyapunov rates for the oscillator-pendulum flow."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import engine
from .engine import IntegrationError, RawTrajectory
from .model import DomainError, ModelParams, Perturbation, PhaseState, energy_y

TOL_MIN, TOL_MAX = 1e-14, 1e-3


@dataclass
class OrbitRecord:
    """A time-sampled orbit with dense output between nodes."""

    params: ModelParams
    pert: Perturbation
    traj: RawTrajectory
    energy_drift: float
    drift_flagged: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.traj.ts

    @property
    def ys(self) -> np.ndarray:
        return self.traj.ys

    @property
    def states(self):
        return [PhaseState.from_y(y) for y in self.traj.ys]

    def state_at(self, t: float) -> PhaseState:
        return PhaseState.from_y(self.traj.eval(t))

    def y_at(self, t: float) -> np.ndarray:
        return self.traj.eval(t)


@dataclass
class EventSpec:
    """Scalar event g(PhaseState); direction +1/-1/0; |g| tolerance at roots."""

    g: Callable[[PhaseState], float]
    direction: int = 0
    refine_tol: float = 1e-12

    def __post_init__(self):
        if self.refine_tol <= 0:
            raise DomainError("refine_tol must be positive")


class Crossing(NamedTuple):
    t: float
    state: PhaseState
    tangential: bool


def _check_tols(rtol, atol):
    for v in (rtol, atol):
        if not (TOL_MIN <= v <= TOL_MAX):
            raise DomainError(f"tolerance {v} outside [{TOL_MIN}, {TOL_MAX}]")


def integrate_orbit(params: ModelParams, pert: Perturbation, x0: PhaseState,
                    t_span, rtol: float = 1e-12, atol: float = 1e-12,
                    max_step: float = np.inf, drift_budget: float = None) -> OrbitRecord:
    """Integrate the Hamilton equations over t_span = (t0, t1) or (0, T)."""
    _check_tols(rtol, atol)
    if np.isscalar(t_span):
        t0, t1 = 0.0, float(t_span)
    else:
        t0, t1 = (float(v) for v in t_span)
    y0 = x0.to_y()
    traj = engine.integrate_raw(engine.MODE_STATE6, params, pert, y0, t0, t1,
                                rtol, atol, max_step=max_step)
    e0 = energy_y(params, pert, traj.ys[0])
    drift = float(np.max(np.abs([energy_y(params, pert, y) - e0 for y in traj.ys])))
    flagged = drift_budget is not None and drift > drift_budget
    return OrbitRecord(params=params, pert=pert, traj=traj,
                       energy_drift=drift, drift_flagged=flagged)


def find_crossings(record: OrbitRecord, ev: EventSpec):
    """Events of ev along the record, refined on the dense interpolant."""

    def g_y(y):
        return ev.g(PhaseState.from_y(y))

    raw = engine.scan_events(record.traj, g_y, direction=ev.direction,
                             refine_tol=ev.refine_tol)
    return [Crossing(t, PhaseState.from_y(y), tang) for t, y, tang in raw]


def _qr_positive(m):
    q, r = np.linalg.qr(m)
    sign = np.sign(np.diag(r))
    sign[sign == 0] = 1.0
    return q * sign, r * sign[:, None]


def finite_time_lyapunov(params: ModelParams, pert: Perturbation, x0: PhaseState,
                         T: float, rtol: float = 1e-10, atol: float = 1e-10,
                         renorm_dt: float = 1.0):
    """Finite-time exponents along the orbit of x0 near the invariant sphere.

    Returns (alpha_hat, beta_hat): alpha_hat the normal (pendulum) rate,
    beta_hat the largest rate among directions tangent to {p3=q3=0}.
    Tangent frames are re-orthonormalized every renorm_dt by QR.
    """
    if T < 50:
        raise DomainError("T must be at least 50")
    y = x0.to_y()
    if math.hypot(y[4], y[5]) > 1e-6 + 10 * params.eps:
        raise DomainError("x0 must start within 1e-6 of the invariant sphere")
    v_tan = np.zeros((6, 4))
    v_tan[:4, :4] = np.eye(4)
    v_nor = np.zeros((6, 2))
    v_nor[4:, :] = np.eye(2)
    log_tan = np.zeros(4)
    log_nor = np.zeros(2)
    t = 0.0
    n_steps = int(math.ceil(T / renorm_dt))
    for _ in range(n_steps):
        dt = min(renorm_dt, T - t)
        y_aug = np.concatenate([y, np.hstack([v_tan, v_nor]).ravel()])
        traj = engine.integrate_raw(engine.MODE_VAR6, params, pert, y_aug,
                                    t, t + dt, rtol, atol)
        y_end = traj.ys[-1]
        y = y_end[:6]
        frame = y_end[6:].reshape(6, 6)
        if not np.all(np.isfinite(frame)):
            raise IntegrationError("renormalization overflow in variational flow")
        v_tan = frame[:, :4].copy()
        v_nor = frame[:, 4:].copy()
        # keep the frames in the splitting of the unperturbed sphere
        v_tan[4:, :] = 0.0
        v_nor[:4, :] = 0.0
        v_tan, r_tan = _qr_positive(v_tan)
        v_nor, r_nor = _qr_positive(v_nor)
        log_tan += np.log(np.abs(np.diag(r_tan)))
        log_nor += np.log(np.abs(np.diag(r_nor)))
        t += dt
    alpha_hat = float(np.max(log_nor) / T)
    beta_hat = float(np.max(log_tan) / T)
    return alpha_hat, beta_hat
