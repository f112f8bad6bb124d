"""Disk-like global surface of section {p2 = 0, q2 > 0} on the invariant
three-sphere, its twist return map, rotation numbers and circle diagnostics.

Section coordinates: J = I1 and theta, the flow-oriented oscillator-1 angle
(osc_angle).  At eps = 0 the return map is exactly the twist map
(J, theta) -> (J, theta + 2*pi*omega1/omega2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import engine, model
from .engine import IntegrationError
from .model import DomainError, ModelParams, Perturbation, PhaseState

TWO_PI = 2.0 * math.pi


class EscapeError(RuntimeError):
    """Orbit left the neighborhood of the invariant sphere."""

    def __init__(self, message, iterates=0):
        super().__init__(message)
        self.iterates = iterates


@dataclass(frozen=True)
class SectionPoint:
    """A point of the disk section with its phase-space lift."""

    J: float
    theta: float
    lift: PhaseState
    c: float
    eps: float
    return_time: float = 0.0
    proj_disp: float = 0.0       # re-projection displacement of the last return
    proj_warned: bool = False


@dataclass(frozen=True)
class RotationEstimate:
    rho: float
    uncertainty: float
    n_iterates: int
    regular: bool


def j_max(params: ModelParams) -> float:
    return model.critical_circle_action(params, params.c, 1)


def disk_coords(J: float, theta: float):
    """Canonical disk embedding (x, y) = sqrt(2J) (cos theta, sin theta)."""
    r = math.sqrt(2.0 * max(J, 0.0))
    return r * math.cos(theta), r * math.sin(theta)


def disk_coords_inverse(x: float, y: float):
    return 0.5 * (x * x + y * y), math.atan2(y, x) % TWO_PI


def _graph_value(nhim, i1, phi1, phi2):
    if nhim is None:
        return 0.0, 0.0
    return nhim.graph_point(i1, phi1, phi2)


def _energy_project(params, pert, y, c, tol=1e-12, max_iter=25):
    """Rescale the oscillator-2 pair to put y on {H_eps = c}."""
    y = y.copy()

    def res(s):
        z = y.copy()
        z[2] *= s
        z[3] *= s
        return model.energy_y(params, pert, z) - c

    s = 1.0
    r = res(s)
    for _ in range(max_iter):
        if abs(r) <= tol:
            break
        ds = 1e-7
        dr = (res(s + ds) - res(s - ds)) / (2 * ds)
        if dr == 0.0:
            break
        s -= r / dr
        r = res(s)
    if abs(r) > 1e-10:
        raise IntegrationError(f"energy projection did not converge; residual {r:.3e}")
    y[2] *= s
    y[3] *= s
    return y


def section_embed(params: ModelParams, pert: Perturbation, J: float, theta: float,
                  nhim=None) -> SectionPoint:
    """Lift (J, theta) to the section: I1=J, phi1=theta, phi2=0, I2 from the
    energy; at eps > 0 the pendulum pair sits on the manifold graph and the
    point is Newton-projected back onto {H_eps = c}."""
    jm = j_max(params)
    if not (0.0 < J < jm):
        raise DomainError(f"J={J} outside the disk interior (0, {jm})")
    i2 = model.solve_i2(params, params.c, J)
    q1, p1 = model.osc_embed(J, theta)
    q2, p2 = model.osc_embed(i2, 0.0)
    p3, q3 = _graph_value(nhim, J, theta, 0.0)
    y = np.array([q1, p1, q2, p2, q3, p3])
    if params.eps != 0.0:
        y = _energy_project(params, pert, y, params.c)
    lift = PhaseState.from_y(y)
    return SectionPoint(J=J, theta=theta % TWO_PI, lift=lift, c=params.c,
                        eps=params.eps)


def _section_state(params, y) -> tuple:
    """(J, theta) read off a state on the section."""
    i1 = 0.5 * (y[0] ** 2 + y[1] ** 2)
    return i1, model.osc_angle(y[0], y[1])


def return_map(params: ModelParams, pert: Perturbation, sp: SectionPoint,
               nhim=None, escape_radius: float = 0.5,
               rtol: float = 1e-12, atol: float = 1e-12) -> SectionPoint:
    """Flow to the next positive section crossing and re-project.

    The section is {p2 = 0, q2 > 0} crossed with p2 decreasing (the
    flow-oriented angle phi2 passing 0).  Raises EscapeError if the pendulum
    pair leaves the manifold neighborhood.
    """
    y0 = sp.lift.to_y()
    i2_here = 0.5 * (y0[2] ** 2 + y0[3] ** 2)
    t_ret_est = TWO_PI / model.omega2(params, i2_here)
    t_max = 2.0 * TWO_PI / params.a2 + 1.0
    traj = engine.integrate_raw(engine.MODE_STATE6, params, pert, y0, 0.0, t_max,
                                rtol, atol)
    # escape monitoring against the graph (wrap q3 to the nearest saddle copy)
    p3g, q3g = _graph_value(nhim, sp.J, sp.theta, 0.0)
    dq3 = (traj.ys[:, 4] - q3g + math.pi) % TWO_PI - math.pi
    dist = np.hypot(dq3, traj.ys[:, 5] - p3g)
    if np.any(dist > escape_radius):
        raise EscapeError("orbit left the sphere neighborhood during the return")

    crossings = engine.scan_events(traj, lambda y: y[3], direction=-1,
                                   refine_tol=1e-12, t_min=0.4 * t_ret_est)
    crossings = [(t, y) for t, y, _ in crossings if y[2] > 0.0]
    if not crossings:
        raise IntegrationError("no section return within the return-time bound")
    t_star, y_star = crossings[0]
    if t_star > 2.0 * TWO_PI / params.a2:
        raise IntegrationError(f"return time {t_star:.3f} exceeds the bound")

    j_new, th_new = _section_state(params, y_star)
    p3t, q3t = _graph_value(nhim, j_new, th_new, 0.0)
    # in-fiber deviation from the graph, at the nearest 2*pi copy of the saddle
    dq3_land = (y_star[4] - q3t + math.pi) % TWO_PI - math.pi
    disp = math.hypot(dq3_land, y_star[5] - p3t)
    y_proj = y_star.copy()
    y_proj[4] = y_star[4] - dq3_land
    y_proj[5] = p3t
    y_proj[3] = 0.0
    if params.eps != 0.0:
        y_proj = _energy_project(params, pert, y_proj, params.c)
    warned = params.eps > 0 and disp > 10.0 * params.eps ** 2 + 1e-9
    return SectionPoint(J=j_new, theta=th_new, lift=PhaseState.from_y(y_proj),
                        c=params.c, eps=params.eps, return_time=t_star,
                        proj_disp=disp, proj_warned=warned)


def plane_invariant(pert: Perturbation) -> bool:
    """True when {p3=q3=0} is exactly invariant: factors in {cos q3 - 1, p3^2}."""
    return all(t.pendulum_factor in ("cos_m1", "p3sq") for t in pert.terms)


def _batch_returns(params, pert, sp: SectionPoint, n: int,
                   rtol: float, atol: float, escape_radius: float = 0.5):
    """n returns extracted from one continuous integration (no re-projection).

    Valid when the start lies on the exactly invariant plane (eps = 0 or a
    plane-invariant perturbation); crossings are screened on step endpoints,
    which is safe because the p2 sign dwell time far exceeds the step size.
    """
    from scipy.optimize import brentq

    i2 = 0.5 * (sp.lift.to_y()[2] ** 2 + sp.lift.to_y()[3] ** 2)
    t_est = TWO_PI / model.omega2(params, i2)
    y = sp.lift.to_y()
    t_done = 0.0
    found = []
    guard = 0.4 * t_est
    last_t = -guard
    while len(found) < n:
        t_chunk = min((n - len(found)) * t_est * 1.1 + 2 * t_est, 600.0)
        traj = engine.integrate_raw(engine.MODE_STATE6, params, pert, y,
                                    t_done, t_done + t_chunk, rtol, atol)
        dq3 = (traj.ys[:, 4] + math.pi) % TWO_PI - math.pi
        if np.any(np.hypot(dq3, traj.ys[:, 5]) > escape_radius):
            raise EscapeError("orbit left the sphere neighborhood", iterates=len(found))
        p2 = traj.ys[:, 3]
        hits = np.nonzero((p2[:-1] > 0.0) & (p2[1:] <= 0.0))[0]
        for k in hits:
            if len(found) >= n:
                break
            ta, tb = traj.ts[k], traj.ts[k + 1]
            span = tb - ta

            def gt(t):
                return engine._dense_eval(traj.Fs[k], traj.ys[k], (t - ta) / span)[3]

            t_star = brentq(gt, ta, tb, xtol=1e-14, rtol=8.9e-16)
            if t_star - last_t < guard:
                continue
            y_star = engine._dense_eval(traj.Fs[k], traj.ys[k], (t_star - ta) / span)
            if y_star[2] <= 0.0:
                continue
            prev_t = last_t if found else 0.0
            last_t = t_star
            j_new, th_new = _section_state(params, y_star)
            dq3l = (y_star[4] + math.pi) % TWO_PI - math.pi
            disp = math.hypot(dq3l, y_star[5])
            found.append(SectionPoint(
                J=j_new, theta=th_new, lift=PhaseState.from_y(y_star),
                c=params.c, eps=params.eps,
                return_time=t_star - prev_t, proj_disp=disp))
        y = traj.ys[-1]
        t_done += t_chunk
        if t_done > (n + 4) * 3.0 * t_est:
            raise IntegrationError("batched return extraction stalled")
    return found


def iterate_return_map(params, pert, sp: SectionPoint, n: int, nhim=None,
                       rtol: float = 1e-12, atol: float = 1e-12):
    """n forward returns; returns the list of successive SectionPoints.

    Uses the single-integration fast path when the perturbation keeps the
    plane exactly invariant and the start sits on it; otherwise iterates
    return_map with its per-return re-projection.
    """
    y0 = sp.lift.to_y()
    on_plane = math.hypot((y0[4] + math.pi) % TWO_PI - math.pi, y0[5]) < 1e-9
    graph_zero = nhim is None or (hasattr(nhim, "is_zero") and nhim.is_zero())
    if (params.eps == 0.0 or plane_invariant(pert)) and on_plane and graph_zero:
        return _batch_returns(params, pert, sp, n, rtol, atol)
    out = []
    cur = sp
    for k in range(n):
        try:
            cur = return_map(params, pert, cur, nhim=nhim, rtol=rtol, atol=atol)
        except EscapeError as e:
            raise EscapeError(str(e), iterates=k) from None
        out.append(cur)
    return out


def exact_return_map(params: ModelParams, J: float, theta: float):
    """Closed-form eps = 0 twist map (J, theta + 2*pi*omega1/omega2)."""
    w1 = model.omega1(params, J)
    w2 = model.omega2(params, model.solve_i2(params, params.c, J))
    return J, (theta + TWO_PI * w1 / w2) % TWO_PI


def exact_rotation_number(params: ModelParams, J: float) -> float:
    """omega1/omega2 mod 1 along the energy level (eps = 0)."""
    w1 = model.omega1(params, J)
    w2 = model.omega2(params, model.solve_i2(params, params.c, J))
    return (w1 / w2) % 1.0


def _weighted_birkhoff(increments: np.ndarray) -> float:
    n = len(increments)
    u = (np.arange(1, n + 1) - 0.5) / n
    w = np.exp(-1.0 / (u * (1.0 - u)))
    return float(np.sum(w * increments) / np.sum(w))


def _rotation_from_angles(thetas: np.ndarray) -> tuple:
    """(rho, uncertainty, regular) from a section-angle sequence."""
    incs = (np.diff(thetas) / TWO_PI) % 1.0
    n = len(incs)
    if n < 8:
        rho = float(np.mean(incs) % 1.0)
        return rho, 1.0, False
    rho_full = _weighted_birkhoff(incs)
    rho_half = _weighted_birkhoff(incs[: n // 2])
    rho_quarter = _weighted_birkhoff(incs[: n // 4])
    u_prev = abs(rho_half - rho_quarter)
    u = abs(rho_full - rho_half)
    uncertainty = max(u, 1e-15)
    regular = (u <= 10.0 * u_prev + 1e-13) and u <= 1e-3
    return rho_full % 1.0, uncertainty, regular


def rotation_number(params: ModelParams, pert: Perturbation, sp: SectionPoint,
                    N: int, nhim=None, rtol: float = 1e-12,
                    atol: float = 1e-12) -> RotationEstimate:
    """Weighted Birkhoff average of the angle increments over N returns."""
    if N < 100:
        raise DomainError("N must be at least 100")
    pts = iterate_return_map(params, pert, sp, N, nhim=nhim, rtol=rtol, atol=atol)
    thetas = np.array([sp.theta] + [q.theta for q in pts])
    rho, unc, regular = _rotation_from_angles(thetas)
    return RotationEstimate(rho=rho, uncertainty=unc, n_iterates=N, regular=regular)


def twist_check(params: ModelParams, pert: Perturbation, j_grid, theta: float = 0.9,
                dj: float = None, nhim=None):
    """Centered difference of the return angle w.r.t. J at fixed theta.

    Returns (min |d theta'/dJ|, common sign, warning) over the grid; the
    warning trips when the minimum is below 1e-3 (near-degenerate twist).
    """
    jm = j_max(params)
    derivs = []
    for J in j_grid:
        if not (0.0 < J < jm):
            raise DomainError("grid point outside the disk interior")
        h = dj if dj is not None else max(1e-6, 1e-4 * jm)
        h = min(h, 0.45 * (jm - J), 0.45 * J)
        sp_p = return_map(params, pert, section_embed(params, pert, J + h, theta, nhim), nhim=nhim)
        sp_m = return_map(params, pert, section_embed(params, pert, J - h, theta, nhim), nhim=nhim)
        dth = (sp_p.theta - sp_m.theta + math.pi) % TWO_PI - math.pi
        derivs.append(dth / (2 * h))
    derivs = np.array(derivs)
    min_abs = float(np.min(np.abs(derivs)))
    same_sign = bool(np.all(derivs > 0) or np.all(derivs < 0))
    sign = float(np.sign(derivs[np.argmin(np.abs(derivs))]))
    warning = min_abs < 1e-3 or not same_sign
    return min_abs, sign, warning


def exact_twist_derivative(params: ModelParams, J: float) -> float:
    """d/dJ of the eps=0 return angle 2*pi*omega1/omega2 along the level set."""
    i2 = model.solve_i2(params, params.c, J)
    w1 = model.omega1(params, J)
    w2 = model.omega2(params, i2)
    # dI2/dJ = -w1/w2 on the energy level
    return TWO_PI * (params.b1 * w2 * w2 + params.b2 * w1 * w1) / w2 ** 3


@dataclass(frozen=True)
class ScanRow:
    J: float
    label: str
    dispersion: float
    rho: float
    uncertainty: float
    regular: bool
    iterates: int


@dataclass(frozen=True)
class ScanReport:
    rows: tuple
    disp_tol: float
    bzi_candidates: tuple   # (J_lo, J_hi) grid sub-intervals with no circle label


_LOW_ORDER_DENOMS = tuple(range(1, 13))


def _near_low_order_rational(rho: float, tol: float = 1e-3) -> bool:
    for q in _LOW_ORDER_DENOMS:
        if abs(rho * q - round(rho * q)) < tol * q:
            return True
    return False


def circle_scan(params: ModelParams, pert: Perturbation, j_grid, N: int,
                nhim=None, disp_tol: float = None, theta0: float = 0.0,
                rtol: float = 1e-12, atol: float = 1e-12) -> ScanReport:
    """Label each grid J as circle / resonant / scattered from N returns."""
    if N < 1000:
        raise DomainError("N must be at least 1e3")
    if disp_tol is None:
        disp_tol = max(10.0 * params.eps, 1e-8)
    rows = []
    for J in j_grid:
        sp = section_embed(params, pert, J, theta0, nhim)
        try:
            pts = iterate_return_map(params, pert, sp, N, nhim=nhim,
                                     rtol=rtol, atol=atol)
        except EscapeError as e:
            rows.append(ScanRow(J=J, label="scattered-escaping", dispersion=math.inf,
                                rho=math.nan, uncertainty=math.inf, regular=False,
                                iterates=e.iterates))
            continue
        js = [sp.J] + [q.J for q in pts]
        thetas = [sp.theta] + [q.theta for q in pts]
        js_arr = np.array(js)
        disp = float(np.max(np.abs(js_arr - js_arr.mean())))
        rho, unc, regular = _rotation_from_angles(np.array(thetas))
        if disp <= disp_tol and regular:
            label = "circle"
        elif disp <= 10 * disp_tol and _near_low_order_rational(rho):
            label = "resonant"
        else:
            label = "scattered"
        rows.append(ScanRow(J=J, label=label, dispersion=disp, rho=rho,
                            uncertainty=unc, regular=regular, iterates=N))
    # BZI candidates: maximal grid runs without a circle label
    bzi = []
    run_start = None
    for i, r in enumerate(rows):
        if r.label != "circle":
            if run_start is None:
                run_start = i
        else:
            if run_start is not None:
                bzi.append((rows[run_start].J, rows[i - 1].J))
                run_start = None
    if run_start is not None:
        bzi.append((rows[run_start].J, rows[-1].J))
    return ScanReport(rows=tuple(rows), disp_tol=disp_tol, bzi_candidates=tuple(bzi))


def target_rotation_orbit(params: ModelParams, pert: Perturbation, rho: float,
                          bracket, N: int, nhim=None, theta0: float = 0.0,
                          tol: float = 1e-10, max_iter: int = 60,
                          rtol: float = 1e-12, atol: float = 1e-12):
    """Bisection on J driving the rotation estimate to rho (mod 1).

    Returns (SectionPoint, RotationEstimate).  The bracket rotation numbers
    must straddle rho strictly.
    """
    j_lo, j_hi = (float(v) for v in bracket)
    rho = rho % 1.0

    def est(J):
        sp = section_embed(params, pert, J, theta0, nhim)
        return rotation_number(params, pert, sp, N, nhim=nhim, rtol=rtol, atol=atol)

    r_lo = est(j_lo)
    r_hi = est(j_hi)
    lo, hi = r_lo.rho, r_hi.rho
    if not (min(lo, hi) < rho < max(lo, hi)):
        raise DomainError(
            f"target rho={rho} not strictly inside bracket estimates ({lo}, {hi})")
    sgn = 1.0 if hi > lo else -1.0
    for _ in range(max_iter):
        j_mid = 0.5 * (j_lo + j_hi)
        r_mid = est(j_mid)
        if abs(r_mid.rho - rho) <= max(tol, 2 * r_mid.uncertainty):
            return section_embed(params, pert, j_mid, theta0, nhim), r_mid
        if sgn * (r_mid.rho - rho) < 0:
            j_lo = j_mid
        else:
            j_hi = j_mid
        if abs(j_hi - j_lo) < 1e-14:
            break
    r_mid = est(0.5 * (j_lo + j_hi))
    return section_embed(params, pert, 0.5 * (j_lo + j_hi), theta0, nhim), r_mid
