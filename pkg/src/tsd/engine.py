"""Integrator backend selection and dense-output utilities.

The compiled extension (tsd._core) is used when importable; otherwise the
pure-python core.  TSD_FORCE_PYTHON=1 forces the fallback.  Both cores share
the integrate_raw signature and the DOP853 tableau, so trajectories agree to
rounding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import _engine_py

if os.environ.get("TSD_FORCE_PYTHON", "") not in ("", "0"):
    _impl = _engine_py
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
        if not hasattr(_impl, "integrate_raw"):
            _impl = _engine_py
    except ImportError:
        _impl = _engine_py

BACKEND = _impl.BACKEND_NAME

MODE_STATE6, MODE_VAR6, MODE_STATE4, MODE_VAR4 = 0, 1, 2, 3


class IntegrationError(RuntimeError):
    """Step underflow or step budget exhausted; carries the partial trajectory."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


def _dense_eval(F, y_old, x):
    """DOP853 degree-7 interpolant at normalized position x in [0,1]."""
    y = np.zeros(F.shape[1])
    for i in range(7):
        y += F[6 - i]
        if i % 2 == 0:
            y *= x
        else:
            y *= 1.0 - x
    return y + y_old


@dataclass
class RawTrajectory:
    """Accepted-step nodes plus per-step dense-output blocks."""

    ts: np.ndarray          # (m+1,)
    ys: np.ndarray          # (m+1, n)
    Fs: np.ndarray          # (m, 7, n)
    nfev: int

    @property
    def t0(self) -> float:
        return float(self.ts[0])

    @property
    def t1(self) -> float:
        return float(self.ts[-1])

    @property
    def direction(self) -> float:
        return 1.0 if self.ts[-1] >= self.ts[0] else -1.0

    def _locate(self, t: float) -> int:
        if self.direction > 0:
            k = int(np.searchsorted(self.ts, t, side="right")) - 1
        else:
            k = int(np.searchsorted(-self.ts, -t, side="right")) - 1
        return max(0, min(k, len(self.ts) - 2))

    def eval(self, t: float) -> np.ndarray:
        """Dense evaluation at a time inside the covered span."""
        k = self._locate(t)
        h = self.ts[k + 1] - self.ts[k]
        return _dense_eval(self.Fs[k], self.ys[k], (t - self.ts[k]) / h)

    def eval_many(self, t_values) -> np.ndarray:
        return np.array([self.eval(t) for t in np.atleast_1d(t_values)])


def integrate_raw(mode, params, pert, y0, t0, t1, rtol, atol,
                  max_step=np.inf, max_steps=10_000_000, raise_on_failure=True):
    """Run the selected core from t0 to t1; returns a RawTrajectory."""
    coef, fid, expo = pert.packed() if hasattr(pert, "packed") else pert
    par = params.packed() if hasattr(params, "packed") else params
    status, ts, ys, Fs, nfev = _impl.integrate_raw(
        int(mode), np.ascontiguousarray(par, dtype=float),
        np.ascontiguousarray(coef, dtype=float),
        np.ascontiguousarray(fid, dtype=np.int32),
        np.ascontiguousarray(expo, dtype=np.int32).reshape(-1, 4),
        np.ascontiguousarray(y0, dtype=float),
        float(t0), float(t1), float(rtol), float(atol), float(max_step), int(max_steps),
        True)
    traj = RawTrajectory(ts=ts, ys=ys, Fs=Fs, nfev=nfev)
    if status != 0 and raise_on_failure:
        reason = "step underflow" if status == 1 else "step budget exhausted"
        raise IntegrationError(f"integration failed: {reason} at t={ts[-1]:.6g}", traj)
    return traj


def rhs_eval(mode, params, pert, y):
    """Single vector-field evaluation through the pure-python implementation."""
    coef, fid, expo = pert.packed() if hasattr(pert, "packed") else pert
    par = params.packed() if hasattr(params, "packed") else params
    return _engine_py.rhs_eval(int(mode), np.asarray(par, dtype=float), coef, fid, expo, y)


def scan_events(traj: RawTrajectory, g, direction=0, refine_tol=1e-12,
                subsamples=4, t_min=None):
    """Find roots of g(state) along the trajectory's dense output.

    direction +1 keeps crossings with g increasing in time, -1 decreasing,
    0 both.  Returns (t_star, y_star, tangential) triples ordered along the
    run; tangential flags |dg/dt| < 1e-10 at the root.
    """
    out = []
    m = len(traj.ts) - 1
    for k in range(m):
        ta, tb = traj.ts[k], traj.ts[k + 1]
        span = tb - ta

        def gt(t):
            return g(_dense_eval(traj.Fs[k], traj.ys[k], (t - ta) / span))

        grid = np.linspace(ta, tb, subsamples + 2)
        vals = [gt(t) for t in grid]
        for j in range(len(grid) - 1):
            va, vb = vals[j], vals[j + 1]
            if va == 0.0:
                t_star = float(grid[j])
            elif va * vb < 0.0:
                lo, hi = sorted((grid[j], grid[j + 1]))
                t_star = float(brentq(gt, lo, hi, xtol=1e-14, rtol=8.9e-16))
            else:
                continue
            if t_min is not None and traj.direction * (t_star - t_min) < 0:
                continue
            y_star = _dense_eval(traj.Fs[k], traj.ys[k], (t_star - ta) / span)
            dt = abs(span) * 1e-7
            gdot = (gt(t_star + dt * traj.direction) - gt(t_star - dt * traj.direction)) / (2 * dt)
            if direction != 0 and gdot * direction <= 0:
                continue
            if abs(g(y_star)) > refine_tol:
                continue
            if out and abs(out[-1][0] - t_star) < 1e-12 * max(1.0, abs(t_star)):
                continue
            out.append((t_star, y_star, abs(gdot) < 1e-10))
    return out
