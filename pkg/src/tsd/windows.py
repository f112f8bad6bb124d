"""Correctly aligned windows on the surface of section: sampled alignment
checker with a one-dimensional degree count, itinerary construction
alternating inner-map and scattering links, staged shadowing witnesses,
and flow-box thickening.

Windows are affine-parametrized parallelograms in (J, theta): the frame
columns carry the exit and entry directions.  The itinerary builder fits
each window's frame to the measured affine model of the incoming connector,
which keeps every link near the identity in window coordinates; the frames
absorb the strong transit shear of the section maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import manifold, melnikov, model, section
from .engine import IntegrationError
from .manifold import BasePoint
from .model import DomainError, ModelParams, Perturbation

TWO_PI = 2.0 * math.pi

#: module state: entry half-width floor used by the window fitting (set by
#: build_itinerary from its hj0 argument)
_ENTRY_FLOOR = [2e-5]


def lift_near(theta: float, ref: float) -> float:
    """The 2*pi translate of theta nearest ref."""
    return ref + ((theta - ref + math.pi) % TWO_PI - math.pi)


@dataclass(frozen=True)
class Window2:
    """Affine window: center + frame @ ((2u-1) hJ, (2v-1) h_theta).

    u runs along the exit direction (frame column 0), v along the entry
    direction.  exit_axis records which coordinate the exit direction
    principally follows; the default frame is axis-aligned.
    """

    center: tuple                # (J, theta)
    half_widths: tuple           # (h_exit, h_entry)
    exit_axis: str = "J"
    frame: tuple = None          # ((FJu, FJv), (FTu, FTv)) columns u, v

    def __post_init__(self):
        if self.exit_axis not in ("J", "theta"):
            raise DomainError("exit_axis must be 'J' or 'theta'")
        if min(self.half_widths) <= 0:
            raise DomainError("half-widths must be positive")
        if self.frame is None:
            if self.exit_axis == "J":
                f = ((1.0, 0.0), (0.0, 1.0))
            else:
                f = ((0.0, 1.0), (1.0, 0.0))
            object.__setattr__(self, "frame", f)

    def _mat(self):
        return np.array(self.frame, dtype=float)

    def point(self, u: float, v: float):
        f = self._mat()
        d = f @ np.array([(2 * u - 1) * self.half_widths[0],
                          (2 * v - 1) * self.half_widths[1]])
        return self.center[0] + d[0], self.center[1] + d[1]

    def coords(self, J: float, theta: float, explore: bool = True):
        """Window coordinates of a point.

        With explore (the default) the angle is tried at the nearby 2*pi
        copies and the copy nearest the window wins: the right metric for
        avoidance checks on the annulus.  With explore=False the angle is
        used exactly as given (the caller tracks a continuous lift)."""
        f = self._mat()
        finv = np.linalg.inv(f)
        th0 = lift_near(theta, self.center[1]) if explore else theta
        candidates = (-1, 0, 1) if explore else (0,)
        best = None
        for k in candidates:
            d = np.array([J - self.center[0], th0 + k * TWO_PI - self.center[1]])
            xy = finv @ d
            u = xy[0] / (2 * self.half_widths[0]) + 0.5
            v = xy[1] / (2 * self.half_widths[1]) + 0.5
            score = max(abs(u - 0.5), abs(v - 0.5))
            if best is None or score < best[0]:
                best = (score, u, v)
        return best[1], best[2]

    def contains(self, J: float, theta: float, pad: float = 0.0) -> bool:
        u, v = self.coords(J, theta)
        return -pad <= u <= 1 + pad and -pad <= v <= 1 + pad

    def diameter(self) -> float:
        f = self._mat()
        c1 = f[:, 0] * self.half_widths[0]
        c2 = f[:, 1] * self.half_widths[1]
        return 2.0 * float(np.linalg.norm(np.abs(c1) + np.abs(c2)))


@dataclass(frozen=True)
class AlignmentReport:
    aligned: bool
    margin: float               # minimal clearance in parametrization units
    degree: int
    samples_used: int
    inconclusive: bool = False
    reason: str = ""


def _outside_clearance(u: float, v: float) -> float:
    """Positive when (u, v) lies outside the unit square (L-inf depth)."""
    return max(-u, u - 1.0, -v, v - 1.0)


def _entry_edge_distance(u: float, v: float) -> float:
    """Distance to the entry set [0,1] x {0,1}."""
    du = max(0.0, -u, u - 1.0)
    return min(math.hypot(du, v), math.hypot(du, v - 1.0))


def check_alignment(w1: Window2, w2: Window2, map_fn, n_boundary: int = 64,
                    n_interior: int = 16, margin_tol: float = 1e-4,
                    map_error: float = 0.0) -> AlignmentReport:
    """Sampled sufficient check that w1 is correctly aligned with w2 under map_fn.

    map_fn takes (J, theta) and returns (J', theta').  The homotopy of the
    definition is the straight line to the affine model fit at the window
    center, so every sampled avoidance must also hold along the segment
    between the true and the model images.  The one-dimensional exit map at
    the mid entry line provides the degree by signed crossings of its lifted
    values.  Verdicts: aligned / not aligned / inconclusive when a clearance
    falls inside the margin band widened by map_error.
    """
    if n_boundary < 64:
        raise DomainError("n_boundary must be at least 64")
    samples = 0

    def image_coords(points, continuous=False):
        """w2-coordinates of mapped points.

        Avoidance distances use the nearest 2*pi copy per point (the annulus
        metric); the degree series instead needs one continuous lift, anchored
        at the window center for its first sample."""
        nonlocal samples
        out = []
        ref = None
        for (J, th) in points:
            Jp, thp = map_fn(J, th)
            samples += 1
            if continuous:
                thp = lift_near(thp, w2.center[1] if ref is None else ref)
                ref = thp
                out.append(w2.coords(Jp, thp, explore=False))
            else:
                out.append(w2.coords(Jp, thp))
        return out

    uc, vc = 0.5, 0.5
    h_fd = 0.25
    base_pts = [w1.point(uc, vc), w1.point(uc + h_fd, vc), w1.point(uc - h_fd, vc),
                w1.point(uc, vc + h_fd), w1.point(uc, vc - h_fd)]
    img = image_coords(base_pts, continuous=True)
    c_im = np.array(img[0])
    du_im = (np.array(img[1]) - np.array(img[2])) / (2 * h_fd)
    dv_im = (np.array(img[3]) - np.array(img[4])) / (2 * h_fd)

    def model_image(u, v):
        return c_im + (u - 0.5) * du_im + (v - 0.5) * dv_im

    band = margin_tol + map_error

    def segment_points(p, q, k=5):
        return [(p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t)
                for t in np.linspace(0.0, 1.0, k)]

    # exit-edge images avoid w2 along the homotopy
    worst_exit = math.inf
    for u_edge in (0.0, 1.0):
        vs = np.linspace(0, 1, n_boundary)
        imgs = image_coords([w1.point(u_edge, v) for v in vs])
        for (p, v) in zip(imgs, vs):
            mdl = model_image(u_edge, v)
            for (us, vs_) in segment_points(p, mdl):
                worst_exit = min(worst_exit, _outside_clearance(us, vs_))
    if worst_exit < band:
        bad = worst_exit <= 0.0
        return AlignmentReport(False, worst_exit, 0, samples,
                               inconclusive=not bad,
                               reason="exit-edge image meets the target window"
                               if bad else "exit avoidance margin below tolerance")

    # the full image avoids w2's entry edges
    worst_entry = math.inf
    grid = list(np.linspace(0, 1, n_interior))
    pts = [(u, v) for u in grid for v in grid]
    for edge in (0.0, 1.0):
        pts += [(edge, v) for v in np.linspace(0, 1, n_boundary)]
        pts += [(u, edge) for u in np.linspace(0, 1, n_boundary)]
    imgs = image_coords([w1.point(u, v) for (u, v) in pts])
    for (p, (u, v)) in zip(imgs, pts):
        mdl = model_image(u, v)
        for (us, vs_) in segment_points(p, mdl):
            worst_entry = min(worst_entry, _entry_edge_distance(us, vs_))
    if worst_entry < band:
        bad = worst_entry <= 0.0
        return AlignmentReport(False, worst_entry, 0, samples,
                               inconclusive=not bad,
                               reason="image touches the target entry edges"
                               if bad else "entry avoidance margin below tolerance")

    # degree of the lifted one-dimensional exit map at the mid entry line
    us = np.linspace(0, 1, max(n_boundary, 64))
    line = image_coords([w1.point(u, 0.5) for u in us], continuous=True)
    a_vals = np.array([p[0] for p in line])
    end_clear = min(abs(a_vals[0] - 0.5), abs(a_vals[-1] - 0.5)) - 0.5
    if end_clear < band:
        bad = end_clear <= 0.0
        return AlignmentReport(False, end_clear, 0, samples,
                               inconclusive=not bad,
                               reason="exit endpoints inside the target span"
                               if bad else "degree endpoint margin below tolerance")
    crossings = 0
    for i in range(len(a_vals) - 1):
        if (a_vals[i] - 0.5) * (a_vals[i + 1] - 0.5) < 0:
            crossings += 1 if a_vals[i + 1] > a_vals[i] else -1
    degree = crossings
    a_model0 = model_image(0.0, 0.5)[0]
    a_model1 = model_image(1.0, 0.5)[0]
    same_side = (a_model0 - 0.5) * (a_vals[0] - 0.5) > 0 and \
        (a_model1 - 0.5) * (a_vals[-1] - 0.5) > 0
    if degree == 0 or not same_side:
        return AlignmentReport(False, min(worst_exit, worst_entry, end_clear),
                               degree, samples, inconclusive=not same_side,
                               reason="zero degree" if degree == 0
                               else "model endpoints disagree with the map")
    return AlignmentReport(True, min(worst_exit, worst_entry, end_clear),
                           degree, samples)


# ---------------------------------------------------------------------------
# stage maps of the polysystem on the section
# ---------------------------------------------------------------------------

@dataclass
class ScatterChannel:
    """One splitting family at a window: branch and the excursion-timing root
    (the separatrix time at the launch, near minus the probe time).  The
    family is tracked across the window by the implicit derivative of the
    critical point, dtau*/dtheta = -M_tau_phi/M_tau_tau at the reference."""

    branch: int
    tau_ref: float
    kick: float                 # predicted action change at the window center
    theta_ref: float = 0.0
    dtau_dtheta: float = 0.0

    def tau_at(self, theta: float) -> float:
        dth = (theta - self.theta_ref + math.pi) % TWO_PI - math.pi
        return self.tau_ref + self.dtau_dtheta * dth


@dataclass
class StageResult:
    J: float
    theta: float
    t_total: float
    glue: float                 # pseudo-orbit discontinuity introduced
    state: np.ndarray           # 6D state at the arrival section point


def _expansion_roots_near(exp, phi1, phi2, tau_ref, span, n_scan=48):
    """Roots of d_tau of the harmonic form within tau_ref +- span."""
    taus = np.linspace(tau_ref - span, tau_ref + span, n_scan)
    vals = np.array([exp.d_tau(phi1, phi2, t) for t in taus])
    roots = []
    for k in range(len(taus) - 1):
        if vals[k] == 0.0 or vals[k] * vals[k + 1] < 0:
            lo, hi = taus[k], taus[k + 1]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if vals[k] * exp.d_tau(phi1, phi2, mid) <= 0:
                    hi = mid
                else:
                    lo = mid
            roots.append(0.5 * (lo + hi))
    return roots


def probe_time(params: ModelParams, pert: Perturbation, nhim, J: float,
               theta: float, branch: int, delta0: float = 1e-6) -> float:
    """Forward time from the fiber launch at offset delta0 to the apex."""
    equ, epu = manifold.pendulum_eigvec(params.lam, "unstable")
    sgn = 1.0 if branch >= 0 else -1.0
    y = manifold.base_lift(params, pert, nhim, BasePoint(J, theta, 0.0))
    y[4] += sgn * delta0 * equ
    y[5] += sgn * delta0 * epu
    t, _ = manifold._integrate_to_apex(params, pert, y, branch, True)
    return t


def predicted_scatter_map(params: ModelParams, pert: Perturbation, J_ref: float,
                          channel: ScatterChannel, dJ_corr: float = 0.0,
                          dtheta_corr: float = 0.0):
    """First-order section scattering map near a reference action level.

    J' = J - eps*dM/dphi1 at the tracked splitting root plus the measured
    constant; theta' = theta plus the measured constant.  The root is
    followed continuously from the channel's tau_ref as the phase varies.
    """
    exp = melnikov.harmonic_expansion(params, pert, J_ref, channel.branch)
    w1 = model.omega1(params, J_ref)
    span = 0.6 * TWO_PI / w1

    def map_fn(J, theta):
        anchor = channel.tau_at(theta)
        roots = _expansion_roots_near(exp, theta, 0.0, anchor, span)
        if not roots:
            raise IntegrationError("splitting root lost inside the window")
        tau = min(roots, key=lambda t: abs(t - anchor))
        kick = -params.eps * exp.d_phi1(theta, 0.0, tau)
        return J + kick + dJ_corr, theta + dtheta_corr

    return map_fn


def stage_scatter_real(params: ModelParams, pert: Perturbation, nhim,
                       J: float, theta: float, channel: ScatterChannel,
                       delta0: float = 1e-6, rtol: float = 1e-12,
                       atol: float = 1e-12) -> StageResult:
    """One real homoclinic excursion continuing the orbit of (J, theta).

    Launches along the unstable direction at the fiber position realizing
    the channel's excursion timing, integrates through the excursion to the
    closest approach of the manifold, re-projects there (the recorded glue,
    orders of magnitude below the window size) and flows to the next
    section crossing.
    """
    from . import engine
    equ, epu = manifold.pendulum_eigvec(params.lam, "unstable")
    sgn = 1.0 if channel.branch >= 0 else -1.0
    t_probe = probe_time(params, pert, nhim, J, theta, channel.branch, delta0)
    # re-solve the splitting root at this launch angle so the excursion stays
    # on the channel's critical family (the landing miss is then second order)
    exp = melnikov.harmonic_expansion(params, pert, J, channel.branch)
    w1 = model.omega1(params, J)
    anchor = channel.tau_at(theta)
    roots = _expansion_roots_near(exp, theta, 0.0, anchor, 0.6 * TWO_PI / w1)
    tau_here = min(roots, key=lambda t: abs(t - anchor)) if roots else anchor
    delta = delta0 * math.exp(params.lam * (tau_here + t_probe))
    y = manifold.base_lift(params, pert, nhim, BasePoint(J, theta, 0.0))
    y[4] += sgn * delta * equ
    y[5] += sgn * delta * epu

    t_apex, y_apex = manifold._integrate_to_apex(params, pert, y, channel.branch,
                                                 True, rtol, atol)
    # follow the decay after the excursion and stop at the first closest
    # approach (a later second excursion must not be swallowed into the stage)
    t_cur = t_apex
    y_cur = y_apex
    best = (math.inf, None, None)
    done = False
    for _ in range(12):
        traj = engine.integrate_raw(engine.MODE_STATE6, params, pert, y_cur,
                                    t_cur, t_cur + 2.0 / params.lam, rtol, atol)
        for k in range(1, len(traj.ts)):
            d = manifold._graph_distance(params, nhim, traj.ys[k])
            if d < best[0]:
                best = (d, traj.ys[k].copy(), float(traj.ts[k]))
            elif best[0] < 0.1 and d > 3.0 * best[0]:
                done = True
                break
        if done:
            break
        y_cur = traj.ys[-1]
        t_cur = float(traj.ts[-1])
    glue, y_land, t_land = float(best[0]), best[1], best[2]
    if y_land is None:
        raise IntegrationError("no landing approach after the excursion")
    b = manifold.base_of_state(y_land)
    p3g, q3g = (0.0, 0.0) if nhim is None else nhim.graph_point(b.i1, b.phi1, b.phi2)
    dq3 = (y_land[4] - q3g + math.pi) % TWO_PI - math.pi
    y_land[4] -= dq3
    y_land[5] = p3g
    if params.eps != 0.0:
        y_land = section._energy_project(params, pert, y_land, params.c)
    sp = section.SectionPoint(J=b.i1, theta=b.phi1,
                              lift=model.PhaseState.from_y(y_land),
                              c=params.c, eps=params.eps)
    nxt = section.return_map(params, pert, sp, nhim=nhim, rtol=rtol, atol=atol)
    return StageResult(J=nxt.J, theta=nxt.theta,
                       t_total=t_land + nxt.return_time, glue=glue,
                       state=nxt.lift.to_y())


def stage_inner_real(params: ModelParams, pert: Perturbation, nhim,
                     J: float, theta: float, n: int, rtol: float = 1e-12,
                     atol: float = 1e-12) -> StageResult:
    sp = section.section_embed(params, pert, J, theta, nhim)
    pts = section.iterate_return_map(params, pert, sp, n, nhim=nhim,
                                     rtol=rtol, atol=atol)
    t_total = sum(p.return_time for p in pts)
    last = pts[-1]
    return StageResult(J=last.J, theta=last.theta, t_total=t_total,
                       glue=max(p.proj_disp for p in pts),
                       state=last.lift.to_y())


def inner_map(params: ModelParams, pert: Perturbation, nhim, n: int,
              rtol: float = 1e-12, atol: float = 1e-12):
    """(J, theta) -> n-th return image, by direct integration."""

    def map_fn(J, theta):
        res = stage_inner_real(params, pert, nhim, J, theta, n, rtol, atol)
        return res.J, res.theta

    return map_fn


def stage_hop_real(params: ModelParams, pert: Perturbation, nhim, J: float,
                   theta: float, n: int, channel: ScatterChannel,
                   rtol: float = 1e-12, atol: float = 1e-12) -> StageResult:
    """n inner returns followed by one homoclinic excursion.

    The twist of the inner returns composed with the angle dependence of the
    kick supplies the expansion (1 + n * twist * dkick/dtheta) that makes
    the window chain uniformly hyperbolic.
    """
    if n > 0:
        mid = stage_inner_real(params, pert, nhim, J, theta, n, rtol, atol)
    else:
        mid = StageResult(J=J, theta=theta, t_total=0.0, glue=0.0, state=None)
    out = stage_scatter_real(params, pert, nhim, mid.J, mid.theta, channel,
                             rtol=rtol, atol=atol)
    return StageResult(J=out.J, theta=out.theta,
                       t_total=mid.t_total + out.t_total,
                       glue=max(mid.glue, out.glue), state=out.state)


# ---------------------------------------------------------------------------
# itinerary construction
# ---------------------------------------------------------------------------

@dataclass
class Connector:
    kind: str                   # "inner" | "scattering"
    n: int = 0                  # inner iterates
    channel: ScatterChannel = None
    dJ_corr: float = 0.0
    dtheta_corr: float = 0.0
    model_error: float = 0.0
    J_ref: float = 0.0
    transit_time: float = 0.0
    affine: tuple = None        # (source window, c, A) fitted by real probes

    def map_fn(self, params, pert, nhim):
        """Checker map: the probe-fitted affine model when available (its
        deviation is carried in model_error), else the analytic map."""
        if self.affine is not None:
            return affine_stage_map(*self.affine)
        if self.kind == "inner":
            return inner_map(params, pert, nhim, self.n)
        scat = predicted_scatter_map(params, pert, self.J_ref, self.channel,
                                     self.dJ_corr, self.dtheta_corr)
        if self.kind == "scattering":
            return scat
        inner = inner_map(params, pert, nhim, self.n)

        def composed(J, theta):
            return scat(*inner(J, theta))

        return composed


@dataclass
class Itinerary:
    windows: list               # Window2
    connectors: list            # Connector, len = len(windows) - 1
    reports: list               # AlignmentReport per link
    targets: list               # (description, J, window index)

    @property
    def min_margin(self) -> float:
        return min((r.margin for r in self.reports), default=math.inf)


class ItineraryError(RuntimeError):
    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


def _rank_channels(params, pert, nhim, J, want_sign, theta, n_theta=24,
                   branches=(1, -1), slope_weight=0.0):
    """Rank splitting channels by kick quality toward want_sign.

    Returns (kick, theta_best, channel, dkick) tuples: for each branch and
    each root family, window angles on a scan grid; dkick is the angle
    derivative of the kick there (the expansion source).  With slope_weight
    the ranking trades kick size against positive dkick.
    """
    out = []
    for branch in branches:
        exp = melnikov.harmonic_expansion(params, pert, J, branch)
        t_probe = probe_time(params, pert, nhim, J, theta, branch)
        w1 = model.omega1(params, J)
        span = 0.55 * TWO_PI / w1
        for th in np.linspace(0.0, TWO_PI, n_theta, endpoint=False):
            for root in _expansion_roots_near(exp, th, 0.0, -t_probe, span):
                kick = -params.eps * exp.d_phi1(th, 0.0, root)
                dkick = -params.eps * exp.d2_phi1(th, 0.0, root)
                d2 = exp.d2_tau(th, 0.0, root)
                slope = -exp.d_tau_phi1(th, 0.0, root) / d2 if d2 != 0 else 0.0
                if kick * want_sign > 0:
                    out.append((kick, th,
                                ScatterChannel(branch, root, kick, th, slope),
                                dkick))
    if slope_weight > 0:
        out.sort(key=lambda r: -(abs(r[0]) * max(r[3], 0.0) ** slope_weight))
    else:
        out.sort(key=lambda r: -abs(r[0]))
    return out


def _resolve_targets(params, pert, nhim, targets):
    resolved = []
    for t in targets:
        if t.get("kind") == "circle":
            resolved.append((f"circle J={t['J']:.6g}", float(t["J"])))
        elif t.get("kind") == "rotation":
            sp, est = section.target_rotation_orbit(
                params, pert, t["rho"], t["bracket"], int(t.get("N", 400)),
                nhim=nhim)
            resolved.append((f"rotation rho={t['rho']:.6g} (J={sp.J:.6g}, "
                             f"rho_hat={est.rho:.6g})", sp.J))
        else:
            raise DomainError(f"unknown target kind {t!r}")
    return resolved


def _fit_stage_affine(stage_fn, w: Window2):
    """Probe the real stage over the window; affine model in window coords.

    Nine probes (center, edge midpoints, corners); least-squares affine fit
    m(u, v) = c + A (u - 1/2, v - 1/2) with the max fit deviation reported.
    Returns (c, A, residual, transit time, glue bound).
    """
    probes = [(0.5, 0.5), (1.0, 0.5), (0.0, 0.5), (0.5, 1.0), (0.5, 0.0),
              (0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
    res = []
    for (u, v) in probes:
        J, th = w.point(u, v)
        res.append(stage_fn(J, th))
    th_ref = res[0].theta
    ims = np.array([[r.J, lift_near(r.theta, th_ref)] for r in res])
    U = np.array([[1.0, u - 0.5, v - 0.5] for (u, v) in probes])
    coef, *_ = np.linalg.lstsq(U, ims, rcond=None)
    c = coef[0]
    A = coef[1:].T
    resid = float(np.max(np.abs(ims - U @ coef)))
    t_tr = float(np.mean([r.t_total for r in res]))
    glue = max(r.glue for r in res)
    return c, A, resid, t_tr, glue


def affine_stage_map(w_src: Window2, c, A):
    """The fitted affine model as a (J, theta) map for the checker."""
    c = np.array(c, dtype=float)
    A = np.array(A, dtype=float)

    def map_fn(J, theta):
        u, v = w_src.coords(J, theta)
        im = c + A @ np.array([u - 0.5, v - 0.5])
        return float(im[0]), float(im[1])

    return map_fn


def _next_window_from_fit(center, A, w_prev: Window2, shrink: float,
                          grow: float) -> Window2:
    """Next window for a twist-then-kick hop: power-iterated exit frame.

    The exit column follows the image of the previous exit direction (which
    converges onto the link's expanding direction), the entry column stays
    the pure action direction; the pair is well conditioned.  The exit
    half-width is cut below the guaranteed stretch (the overhang realizes
    the covering), the entry half-width padded over the image's action
    extent, which the expansion keeps at a stable fixed point.
    """
    A = np.asarray(A, dtype=float)
    a_u = A[:, 0]
    f_u = a_u / np.linalg.norm(a_u)
    f_v = np.array([1.0, 0.0])
    f_new = np.column_stack([f_u, f_v])
    m = np.linalg.inv(f_new) @ A
    h_exit = (0.5 * abs(m[0, 0]) - 0.5 * abs(m[0, 1])) * shrink
    h_entry = 0.5 * (abs(m[1, 0]) + abs(m[1, 1])) * grow
    if h_exit <= 0:
        raise ItineraryError("link lost its stretching direction")
    # the contraction would squeeze the entry span into the quadratic noise
    # floor of the stage fits; hold it at the floor instead
    h_entry = max(h_entry, _ENTRY_FLOOR[0])
    axis = "J" if abs(f_u[0]) >= abs(f_u[1]) else "theta"
    return Window2(center=(float(center[0]), float(center[1]) % TWO_PI),
                   half_widths=(float(h_exit), float(h_entry)), exit_axis=axis,
                   frame=tuple(map(tuple, f_new)))


def build_itinerary(params: ModelParams, pert: Perturbation, nhim, targets,
                    hj0: float = None, htheta0: float = 0.1,
                    n_boundary: int = 64, margin_tol: float = 1e-4,
                    max_windows: int = 2000, expand_target: float = 1.2,
                    progress=None) -> Itinerary:
    """Chain of correctly aligned windows visiting the targets in order.

    Scattering links carry the action across the invariant circles; inner
    links re-phase the angle (using the twist transport) whenever the local
    kick toward the target falls below rephase_drop times the best available.
    Window frames are fitted to the measured affine model of each link, and
    every pair is validated by check_alignment with the probed model error.
    """
    if params.eps <= 0:
        raise ItineraryError("no scattering channel can cross invariant "
                             "circles at eps = 0 (the action is conserved)")
    eps = params.eps
    hj0 = eps / 4.0 if hj0 is None else hj0
    _ENTRY_FLOOR[0] = hj0
    resolved = _resolve_targets(params, pert, nhim, targets)
    windows: list = []
    connectors: list = []
    reports: list = []
    target_marks = []

    def note(msg):
        if progress is not None:
            progress(msg)

    def link(w_next, conn, map_fn):
        w_prev = windows[-1]
        rep = check_alignment(w_prev, w_next, map_fn, n_boundary=n_boundary,
                              margin_tol=margin_tol, map_error=conn.model_error)
        if not rep.aligned:
            raise ItineraryError(
                f"link {len(windows) - 1} -> {len(windows)} failed: {rep.reason}",
                pair=(len(windows) - 1, len(windows)))
        windows.append(w_next)
        connectors.append(conn)
        reports.append(rep)

    desc0, j0 = resolved[0]
    dir0 = 1.0 if (len(resolved) < 2 or resolved[1][1] >= j0) else -1.0
    ranked0 = _rank_channels(params, pert, nhim, j0, dir0, 0.0, slope_weight=1.0)
    theta0 = ranked0[0][1] if ranked0 else 0.0
    # seed the exit direction along the predicted expanding eigenvector of
    # the first twist-then-kick hop: v+ ~ (dkick, lambda_plus - 1)
    if ranked0 and ranked0[0][3] > 0:
        e0 = expand_target
        lam_plus = 1.0 + 0.5 * (e0 + math.sqrt(e0 * e0 + 4 * e0))
        v_plus = np.array([ranked0[0][3], lam_plus - 1.0])
        v_plus /= np.linalg.norm(v_plus)
    else:
        v_plus = np.array([0.0, 1.0])
    w_first = Window2(center=(j0, theta0), half_widths=(htheta0, hj0),
                      exit_axis="theta",
                      frame=((float(v_plus[0]), 1.0), (float(v_plus[1]), 0.0)))
    windows.append(w_first)
    target_marks.append((desc0, j0, 0))
    cur = w_first

    def _normalized_fit_error(w_next, center, A, stage_fn):
        """Fit deviation measured in the next window's parametrization units."""
        err = 0.0
        for (u, v) in ((0.25, 0.25), (0.75, 0.75), (0.8, 0.2)):
            res = stage_fn(*cur.point(u, v))
            pred = np.array(center) + np.array(A) @ np.array([u - 0.5, v - 0.5])
            ut, vt = w_next.coords(res.J, res.theta)
            up, vp = w_next.coords(float(pred[0]), float(pred[1]))
            err = max(err, abs(ut - up), abs(vt - vp))
        return err

    def _add_link(kind, stage_fn, conn, err_cap=0.08):
        nonlocal cur
        center, A, resid, t_tr, glue = _fit_stage_affine(stage_fn, cur)
        conn.transit_time = t_tr
        conn.affine = (cur, tuple(center), tuple(map(tuple, A)))
        # provisional window to measure the fit error in its own units,
        # then final sizes with a six-sigma margin allowance on each side
        w_prov = _next_window_from_fit(center, A, cur, 1.0, 1.0)
        err_uv = _normalized_fit_error(w_prov, center, A, stage_fn)
        conn.model_error = err_uv + margin_tol
        pad = 6.0 * (margin_tol + conn.model_error)
        shrink_k = max(1.0 - pad, 0.5)
        size_damp = 1.0
        if err_uv > err_cap:
            # nonlinearity over the window: shrink the next window outright
            size_damp = max(0.25, err_cap / err_uv)
        w_next = _next_window_from_fit(center, A, cur, shrink_k * size_damp,
                                       (1.0 + pad) * size_damp)
        link(w_next, conn, conn.map_fn(params, pert, nhim))
        cur = w_next
        return center

    def do_hop(channel, n):
        stage = lambda J, th: stage_hop_real(params, pert, nhim, J, th, n,
                                             channel)
        conn = Connector(kind="hop", n=n, channel=channel,
                         J_ref=cur.center[0])
        return _add_link("hop", stage, conn)

    def do_scatter(channel):
        stage = lambda J, th: stage_scatter_real(params, pert, nhim, J, th,
                                                 channel)
        conn = Connector(kind="scattering", channel=channel, J_ref=cur.center[0])
        pred = predicted_scatter_map(params, pert, conn.J_ref, channel)
        Jp, thp = pred(*cur.point(0.5, 0.5))
        center = _add_link("scattering", stage, conn)
        conn.dJ_corr = center[0] - Jp
        conn.dtheta_corr = lift_near(center[1], thp) - thp
        return center

    def do_inner(n):
        stage = lambda J, th: stage_inner_real(params, pert, nhim, J, th, n)
        conn = Connector(kind="inner", n=n)
        return _add_link("inner", stage, conn)

    for (desc, j_tgt) in resolved[1:]:
        while True:
            if len(windows) > max_windows:
                raise ItineraryError("window budget exceeded")
            cur_J, cur_th = cur.center
            direction = 1.0 if j_tgt > cur_J else -1.0
            remaining = (j_tgt - cur_J) * direction
            if remaining <= 1e-12:
                target_marks.append((desc, j_tgt, len(windows) - 1))
                break
            ranked = _rank_channels(params, pert, nhim, cur_J, direction,
                                    cur_th, slope_weight=1.0)
            feasible = [r for r in ranked if r[3] > 0]
            if not feasible:
                raise ItineraryError("no expanding scattering channel with "
                                     f"the needed sign at J={cur_J:.6g}")
            finishing = remaining <= abs(ranked[0][0])
            if finishing:
                cand = [r for r in feasible if abs(r[0]) >= 0.35 * remaining]
                pick = min(cand, key=lambda r: abs(abs(r[0]) - remaining)) \
                    if cand else feasible[0]
            else:
                pick = feasible[0]
            kick, th_ch, channel, dkick = pick
            # inner iterates: reach the channel angle and supply expansion
            twist = section.exact_twist_derivative(params, cur_J)
            n_exp = int(math.ceil(expand_target / (twist * abs(dkick))))
            n_exp = min(max(n_exp, 5), 1500)
            w1 = model.omega1(params, cur_J)
            w2v = model.omega2(params, model.solve_i2(params, params.c, cur_J))
            dth_ret = TWO_PI * w1 / w2v
            best_n = None
            for n in range(n_exp, n_exp + 80):
                land = (cur_th + n * dth_ret) % TWO_PI
                dist = abs((land - th_ch + math.pi) % TWO_PI - math.pi)
                if best_n is None or dist < best_n[0]:
                    best_n = (dist, n)
                if dist < 0.05:
                    break
            _, n_use = best_n
            center = do_hop(channel, n_use)
            note(f"J={cur.center[0]:.6f} ({len(windows)} windows, n={n_use})")
            if finishing and abs(center[0] - j_tgt) <= max(
                    cur.half_widths[1], abs(kick)):
                target_marks.append((desc, j_tgt, len(windows) - 1))
                note(f"target reached: {desc} at window {len(windows) - 1}")
                break

    return Itinerary(windows=windows, connectors=connectors, reports=reports,
                     targets=target_marks)


# ---------------------------------------------------------------------------
# shadowing witnesses
# ---------------------------------------------------------------------------

@dataclass
class WitnessStage:
    window_index: int
    J: float
    theta: float
    u: float
    v: float
    t_arrive: float
    glue: float


@dataclass
class ShadowingWitness:
    mode: str                   # "staged" | "subdivision"
    initial_state: np.ndarray
    stages: list
    max_glue: float
    delta: float                # max window diameter (the shadowing radius)
    revalidated: bool = False
    revalidation_dev: float = math.nan


def verify_shadowing(params: ModelParams, pert: Perturbation, nhim,
                     itinerary: Itinerary, search_depth: int = 40,
                     revalidate: bool = True, rtol: float = 1e-12,
                     atol: float = 1e-12, progress=None) -> ShadowingWitness:
    """Walk a piecewise-true orbit through every window of the itinerary.

    Each link integrates the real flow; when a landing drifts off the next
    window's center the exit coordinate is re-aimed by bisection (the
    subdivision step of the construction).  The only discontinuities are the
    landing re-projections onto the manifold, recorded as glue and orders of
    magnitude below the window size.  With revalidate the whole walk is
    repeated at 10x tighter tolerance and compared stage by stage.
    """

    def walk(rt, at):
        stages = []
        w0 = itinerary.windows[0]
        J, th = w0.center
        t_acc = 0.0
        glue_max = 0.0
        stages.append(WitnessStage(0, J, th, 0.5, 0.5, 0.0, 0.0))
        for k, conn in enumerate(itinerary.connectors):
            w_here = itinerary.windows[k]
            w_next = itinerary.windows[k + 1]

            def run(u_exit, v_entry):
                J_run, th_run = w_here.point(u_exit, v_entry)
                if conn.kind == "inner":
                    return stage_inner_real(params, pert, nhim, J_run, th_run,
                                            conn.n, rt, at)
                return stage_scatter_real(params, pert, nhim, J_run, th_run,
                                          conn.channel, rtol=rt, atol=at)

            u_cur, v_cur = w_here.coords(J, th)
            res = run(u_cur, v_cur)
            u_im, v_im = w_next.coords(res.J, res.theta)
            if not (0.02 <= u_im <= 0.98):
                lo_u, hi_u = 0.0, 1.0
                for _ in range(min(search_depth, 60)):
                    if u_im > 0.5:
                        hi_u = u_cur
                    else:
                        lo_u = u_cur
                    u_cur = 0.5 * (lo_u + hi_u)
                    res = run(u_cur, v_cur)
                    u_im, v_im = w_next.coords(res.J, res.theta)
                    if 0.25 <= u_im <= 0.75:
                        break
            if not (-0.001 <= u_im <= 1.001 and -0.001 <= v_im <= 1.001):
                raise ItineraryError(
                    f"stage {k} landed outside window {k + 1} "
                    f"(u={u_im:.3f}, v={v_im:.3f})", pair=(k, k + 1))
            t_acc += res.t_total
            glue_max = max(glue_max, res.glue)
            J, th = res.J, res.theta
            stages.append(WitnessStage(k + 1, J, th, u_im, v_im, t_acc, res.glue))
            if progress is not None and k % 25 == 0:
                progress(f"witness at window {k + 1}/{len(itinerary.connectors)}")
        return stages, glue_max

    stages, glue_max = walk(rtol, atol)
    delta = max(w.diameter() for w in itinerary.windows)
    witness = ShadowingWitness(
        mode="staged",
        initial_state=section.section_embed(
            params, pert, stages[0].J, stages[0].theta, nhim).lift.to_y(),
        stages=stages, max_glue=glue_max, delta=delta)
    if revalidate:
        stages2, _ = walk(rtol / 10.0, atol / 10.0)
        dev = max(abs(a.J - b.J)
                  + abs((a.theta - b.theta + math.pi) % TWO_PI - math.pi)
                  for a, b in zip(stages, stages2))
        witness.revalidated = True
        witness.revalidation_dev = dev
    return witness


def subdivision_witness(maps, windows, depth: int = 30, n_grid: int = 33):
    """Literal nested-subdivision witness for an explicit chain of maps.

    maps[k] sends window k toward window k+1 (cheap closed-form callables).
    Bisects the exit-axis coordinate of the first window, keeping the
    sub-interval whose composed image still crosses the next window, down
    the whole chain.  Returns (u_star, trace) with the visited (J, theta).
    """
    w0 = windows[0]

    def through(u):
        J, th = w0.point(u, 0.5)
        pts = [(J, th)]
        for mp in maps:
            J, th = mp(J, th)
            pts.append((J, th))
        return pts

    lo, hi = 0.0, 1.0
    for k in range(1, len(windows)):
        refined = False
        for _ in range(depth):
            us = np.linspace(lo, hi, n_grid)
            vals = []
            for u in us:
                pts = through(u)
                uu, vv = windows[k].coords(*pts[k])
                vals.append((uu, vv))
            inside = [i for i, (uu, vv) in enumerate(vals)
                      if 0.0 <= uu <= 1.0 and -0.02 <= vv <= 1.02]
            if not inside:
                raise ItineraryError(f"subdivision lost the chain at window {k}",
                                     pair=(k - 1, k))
            lo_new = us[max(inside[0] - 1, 0)]
            hi_new = us[min(inside[-1] + 1, len(us) - 1)]
            if hi_new - lo_new >= hi - lo:
                lo, hi = lo_new, hi_new
                break
            lo, hi = lo_new, hi_new
            refined = True
            if hi - lo < 1e-15:
                break
    u_star = 0.5 * (lo + hi)
    trace = through(u_star)
    for k in range(len(windows)):
        uu, vv = windows[k].coords(*trace[k])
        if not (-0.05 <= uu <= 1.05 and -0.05 <= vv <= 1.05):
            raise ItineraryError(f"witness misses window {k}", pair=(k - 1, k))
    return u_star, trace


# ---------------------------------------------------------------------------
# flow-box thickening
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowWindow:
    window: Window2
    t_center: float
    half_time: float
    n_step: int                 # integer time-map power to the next window
    nesting_margin: float


def thicken_to_flow_windows(itinerary: Itinerary, transit_times,
                            flow_box_half_time: float):
    """Product windows [t - h, t + h] with the time boundary in the exit set.

    transit_times[k] is the flow time of link k (from the witness walk or an
    estimate).  Alignment under the integer-time map needs the next window's
    time interval strictly inside the translated current one, which costs
    half-time proportional to the distance of each transit time from the
    nearest integer; the construction reports the margins and fails when the
    budget runs out.
    """
    if flow_box_half_time <= 0:
        raise DomainError("flow_box_half_time must be positive")
    out = []
    t_center = 0.0
    h = flow_box_half_time
    for k, w in enumerate(itinerary.windows):
        if k == len(itinerary.windows) - 1:
            out.append(FlowWindow(w, t_center, h, 0, math.inf))
            break
        dt = float(transit_times[k])
        n_step = int(round(dt))
        slack_needed = abs(dt - n_step)
        h_next = h - slack_needed - 1e-9
        if h_next <= 0:
            raise DomainError(
                f"time-interval nesting violated at link {k}: "
                f"needs {slack_needed:.3f} of half-time, only {h:.3f} left")
        out.append(FlowWindow(w, t_center, h, n_step, h - h_next - slack_needed + 1e-9))
        t_center += dt
        h = h_next
    return out
