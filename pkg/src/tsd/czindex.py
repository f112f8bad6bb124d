"""Rotation index of periodic orbits of the oscillator subsystem on its
star-shaped energy levels: linearized flow projected onto the contact
planes in a global quaternionic frame, winding interval and the two-case
index rule, plus the convexity scan."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine, model
from .model import DomainError, ModelParams, Perturbation

TWO_PI = 2.0 * math.pi


class ClosureError(RuntimeError):
    """Supplied orbit does not close to the required tolerance."""


class DegeneracyError(RuntimeError):
    """Monodromy has an eigenvalue too close to 1."""


class UnwrapError(RuntimeError):
    """Winding unwrap ambiguous at the arc's time resolution."""


@dataclass(frozen=True)
class SymplecticArc:
    """Time-sampled 2x2 symplectic matrices along a closed orbit."""

    times: np.ndarray        # (n,) grid on [0, T]
    matrices: np.ndarray     # (n, 2, 2), matrices[0] = id
    det_drift: float

    @property
    def period(self) -> float:
        return float(self.times[-1])


@dataclass(frozen=True)
class CzResult:
    winding_interval: tuple
    index: int
    nondegenerate: bool
    spectrum_gap: float
    boundary_margin: float    # distance of the interval endpoints to integers


def gradient_h00(params: ModelParams, y4):
    q1, p1, q2, p2 = y4
    w1 = params.a1 + params.b1 * 0.5 * (q1 * q1 + p1 * p1)
    w2 = params.a2 + params.b2 * 0.5 * (q2 * q2 + p2 * p2)
    return np.array([w1 * q1, w1 * p1, w2 * q2, w2 * p2])


def hamiltonian_field_4(params: ModelParams, y4):
    g = gradient_h00(params, y4)
    return np.array([g[1], -g[0], g[3], -g[2]])


def _omega4(u, v) -> float:
    return (u[0] * v[1] - u[1] * v[0]) + (u[2] * v[3] - u[3] * v[2])


def contact_frame(params: ModelParams, y4):
    """Oriented symplectic frame of the contact plane at a point of the level.

    The quaternionic tangent frame of the unit sphere is carried to the
    star-shaped level by the radial graph map; the ordering makes the frame
    positively oriented for the contact form that co-orients the flow.
    """
    x = np.asarray(y4, dtype=float)
    s = float(np.linalg.norm(x))
    zh = x / s
    q1, p1, q2, p2 = zh
    f1 = np.array([-p2, -q2, p1, q1])      # k * zhat
    f2 = np.array([-q2, p2, q1, -p1])      # j * zhat
    grad = gradient_h00(params, x)
    gx = float(grad @ x)
    if abs(gx) < 1e-14:
        raise DomainError("level not star-shaped at this point")
    e1 = s * (f1 - (grad @ f1) / gx * x)
    e2 = s * (f2 - (grad @ f2) / gx * x)
    nu = -_omega4(e1, e2)
    if nu <= 0.0:
        raise AssertionError("quaternionic frame degenerated")
    scale = 1.0 / math.sqrt(nu)
    return e1 * scale, e2 * scale


def star_shaped_check(params: ModelParams, c: float, n_rays: int = 200,
                      seed: int = 0) -> float:
    """Minimum of x.grad(H00)(x)/|x| over ray samples of the level (must be > 0)."""
    rng = np.random.default_rng(seed)
    worst = math.inf
    for _ in range(n_rays):
        u = rng.normal(size=4)
        u /= np.linalg.norm(u)
        lo, hi = 0.0, 1.0
        while model.h00_cartesian(params, hi * u) < c:
            hi *= 2.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if model.h00_cartesian(params, mid * u) < c:
                lo = mid
            else:
                hi = mid
        x = 0.5 * (lo + hi) * u
        worst = min(worst, float(gradient_h00(params, x) @ x) / np.linalg.norm(x))
    if worst <= 0.0:
        raise DomainError("energy level is not star-shaped for the origin")
    return worst


def critical_circle_orbit(params: ModelParams, which: int):
    """Initial point and prime period of the elliptic circle of oscillator `which`."""
    istar = model.critical_circle_action(params, params.c, which)
    r = math.sqrt(2.0 * istar)
    if which == 1:
        y0 = np.array([r, 0.0, 0.0, 0.0])
        T = TWO_PI / model.omega1(params, istar)
    else:
        y0 = np.array([0.0, 0.0, r, 0.0])
        T = TWO_PI / model.omega2(params, istar)
    return y0, T


def reduce_to_contact_arc(params: ModelParams, pert: Perturbation, y0, T: float,
                          n_samples: int = None, closure_tol: float = 1e-9,
                          rtol: float = 1e-12, atol: float = 1e-12) -> SymplecticArc:
    """Linearized flow along a closed orbit expressed on the contact planes.

    Integrates the variational flow of the oscillator subsystem, projects the
    transported frame onto the contact planes along the flow direction and
    renormalizes the determinant drift at every sample.  The admissible
    coupling factors vanish with their pendulum gradients at the saddle, so
    the restricted subsystem is the eps-independent quartic-oscillator flow.
    """
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (4,):
        raise DomainError("orbit point must be a 4-vector (q1, p1, q2, p2)")
    c = model.h00_cartesian(params, y0)
    star_shaped_check(params, c, n_rays=64)
    aug0 = np.concatenate([y0, np.eye(4).ravel()])
    traj = engine.integrate_raw(engine.MODE_VAR4, params, Perturbation.zero(),
                                aug0, 0.0, T, rtol, atol)
    if np.max(np.abs(traj.ys[-1, :4] - y0)) > closure_tol:
        raise ClosureError("orbit does not close to tolerance over the period")

    if n_samples is None:
        # a generous bound on the contact-plane rotation rate
        rate = (model.omega1(params, model.critical_circle_action(params, c, 1))
                + model.omega2(params, model.critical_circle_action(params, c, 2))
                + params.a1 + params.a2)
        n_samples = max(256, int(64 * (1 + rate * T / TWO_PI)))
    ts = np.linspace(0.0, T, n_samples + 1)
    e1_0, e2_0 = contact_frame(params, y0)
    mats = np.empty((n_samples + 1, 2, 2))
    det_drift = 0.0
    for k, t in enumerate(ts):
        yk = traj.eval(t)
        x = yk[:4]
        Y = yk[4:].reshape(4, 4)
        v1 = Y @ e1_0
        v2 = Y @ e2_0
        e1, e2 = contact_frame(params, x)
        basis = np.column_stack([hamiltonian_field_4(params, x),
                                 gradient_h00(params, x), e1, e2])
        alpha = np.linalg.solve(basis, np.column_stack([v1, v2]))
        if np.max(np.abs(alpha[1])) > 1e-6:
            raise AssertionError("transported vector left the tangent space")
        m = alpha[2:4, :]
        det = float(np.linalg.det(m))
        det_drift = max(det_drift, abs(det - 1.0))
        mats[k] = m / math.sqrt(det)
    mats[0] = np.eye(2)
    if det_drift > 1e-8:
        raise AssertionError(f"determinant drift {det_drift:.2e} exceeds 1e-8")
    return SymplecticArc(times=ts, matrices=mats, det_drift=det_drift)


def winding_interval(arc: SymplecticArc, n_s: int = 64):
    """[min, max] of the winding of arc directions over a circle of starts.

    Tracks the continuous argument of Phi(t) e^{2 pi i s}; every unwrap step
    must rotate by less than 0.9*pi or the arc resolution is insufficient.
    """
    if n_s < 32:
        raise DomainError("n_s must be at least 32")
    deltas = np.empty(n_s)
    for j, s in enumerate(np.arange(n_s) / n_s):
        v0 = np.array([math.cos(TWO_PI * s), math.sin(TWO_PI * s)])
        prev = v0
        theta = math.atan2(v0[1], v0[0])
        theta0 = theta
        for m in arc.matrices[1:]:
            cur = m @ v0
            dth = math.atan2(prev[0] * cur[1] - prev[1] * cur[0],
                             prev[0] * cur[0] + prev[1] * cur[1])
            if abs(dth) >= 0.9 * math.pi:
                raise UnwrapError("step rotation too large; refine the arc sampling")
            theta += dth
            prev = cur
        deltas[j] = (theta - theta0) / TWO_PI
    return float(np.min(deltas)), float(np.max(deltas))


def cz_index(arc: SymplecticArc, n_s: int = 64, gap_tol: float = 1e-8,
             boundary_tol: float = 1e-9) -> CzResult:
    """Index from the winding interval: 2k when the interval contains the
    integer k, 2k+1 when it sits strictly inside (k, k+1)."""
    mono = arc.matrices[-1]
    eigs = np.linalg.eigvals(mono)
    gap = float(np.min(np.abs(eigs - 1.0)))
    if gap < gap_tol:
        raise DegeneracyError(f"monodromy spectrum within {gap:.2e} of 1")
    lo, hi = winding_interval(arc, n_s)
    if hi - lo >= 0.5 + 1e-6:
        raise AssertionError("winding interval length exceeds the 1/2 bound")
    k_lo = math.ceil(lo - boundary_tol)
    k_hi = math.floor(hi + boundary_tol)
    margin = min(abs(lo - round(lo)), abs(hi - round(hi)))
    if k_lo <= k_hi:
        index = 2 * k_lo
        if k_lo != k_hi:
            raise AssertionError("winding interval contains two integers")
    else:
        k = math.floor(lo)
        if math.floor(hi) != k:
            raise AssertionError("interval straddles an integer ambiguously")
        index = 2 * k + 1
    nondeg = gap >= gap_tol
    return CzResult(winding_interval=(lo, hi), index=index, nondegenerate=nondeg,
                    spectrum_gap=gap, boundary_margin=margin)


def expected_circle_winding(params: ModelParams, which: int, covers: int = 1) -> float:
    """Closed-form winding of the elliptic circles: the contact-plane flow is
    a rigid rotation at rate omega_self + a_other."""
    istar = model.critical_circle_action(params, params.c, which)
    if which == 1:
        w_self = model.omega1(params, istar)
        a_other = params.a2
    else:
        w_self = model.omega2(params, istar)
        a_other = params.a1
    return covers * (w_self + a_other) / w_self


@dataclass(frozen=True)
class ScanEntry:
    orbit_id: str
    period: float
    winding: tuple
    index: int
    nondegenerate: bool
    spectrum_gap: float
    note: str = ""


def dynamical_convexity_scan(params: ModelParams, pert: Perturbation, orbits):
    """Indices of the supplied closed orbits; convex verdict when all >= 3.

    orbits: iterable of (orbit_id, y0, T).  Degenerate orbits are excluded
    with a note rather than failing the scan.
    """
    entries = []
    all_ok = True
    for orbit_id, y0, T in orbits:
        try:
            arc = reduce_to_contact_arc(params, pert, y0, T)
            res = cz_index(arc)
        except (DegeneracyError, ClosureError) as exc:
            entries.append(ScanEntry(orbit_id=orbit_id, period=T,
                                     winding=(math.nan, math.nan), index=0,
                                     nondegenerate=False, spectrum_gap=0.0,
                                     note=f"excluded: {exc}"))
            continue
        entries.append(ScanEntry(orbit_id=orbit_id, period=T,
                                 winding=res.winding_interval, index=res.index,
                                 nondegenerate=res.nondegenerate,
                                 spectrum_gap=res.spectrum_gap))
        if res.index < 3:
            all_ok = False
    return entries, all_ok
