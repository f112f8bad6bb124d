"""Numerical normally hyperbolic manifold: first-order graph correction with
optional flow refinement, stable/unstable fiber footpoints, homoclinic
shooting through the pendulum excursion, and the direct scattering map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import engine, model
from .engine import IntegrationError
from .model import DomainError, ModelParams, Perturbation, PhaseState

TWO_PI = 2.0 * math.pi


class ResonanceError(RuntimeError):
    """Small divisor in the Fourier solve (cannot occur for lam > 0; guarded)."""


class FiberError(RuntimeError):
    """Point not on a local stable/unstable fiber of the manifold."""


class ShootingError(RuntimeError):
    """Newton shooting for a homoclinic orbit failed."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class BasePoint:
    """Coordinates (I1, phi1, phi2) on the invariant sphere; I2 from energy."""

    i1: float
    phi1: float
    phi2: float

    def wrapped(self):
        return BasePoint(self.i1, self.phi1 % TWO_PI, self.phi2 % TWO_PI)


@dataclass
class NhimApprox:
    """Graph (p3, q3) = graph(I1, phi1, phi2) stored as Fourier data per I1 node."""

    params: ModelParams
    pert: Perturbation
    order: str                    # "zero" | "one" | "refined"
    i1_nodes: np.ndarray
    harmonics: list               # list of (n1 array, n2 array) per use; shared
    p_coeff: np.ndarray           # (n_nodes, n_harm) complex
    q_coeff: np.ndarray
    invariance_residual: float = 0.0
    residual_flagged: bool = False
    _p_spline: object = None
    _q_spline: object = None

    def _splines(self):
        if self._p_spline is None:
            if len(self.i1_nodes) >= 2:
                self._p_spline = CubicSpline(self.i1_nodes, self.p_coeff, axis=0)
                self._q_spline = CubicSpline(self.i1_nodes, self.q_coeff, axis=0)
            else:
                self._p_spline = lambda x: self.p_coeff[0]
                self._q_spline = lambda x: self.q_coeff[0]
        return self._p_spline, self._q_spline

    def graph_point(self, i1: float, phi1: float, phi2: float):
        """(p3, q3) of the manifold graph at the base point."""
        if len(self.harmonics) == 0:
            return 0.0, 0.0
        ps, qs = self._splines()
        n1, n2 = self.harmonics
        phase = np.exp(1j * (n1 * phi1 + n2 * phi2))
        pc = ps(i1)
        qc = qs(i1)
        return float(np.real(np.sum(pc * phase))), float(np.real(np.sum(qc * phase)))

    def is_zero(self) -> bool:
        return len(self.harmonics) == 0 or (
            np.max(np.abs(self.p_coeff)) < 1e-15 and np.max(np.abs(self.q_coeff)) < 1e-15)


def _zero_nhim(params, pert):
    return NhimApprox(params=params, pert=pert, order="zero",
                      i1_nodes=np.array([]), harmonics=[],
                      p_coeff=np.zeros((0, 0)), q_coeff=np.zeros((0, 0)),
                      invariance_residual=0.0)


def _forcing_harmonics(params, pert, i1, n_phi):
    """Fourier data of f = dH1/dp3 and g = dH1/dq3 on the zero section.

    Both are trig polynomials of the inner angles; f collects the p3-factor
    terms, g the sin-factor terms (the other factors have vanishing pendulum
    gradient at the origin).
    """
    i2 = model.solve_i2(params, params.c, i1)
    a = TWO_PI * np.arange(n_phi) / n_phi
    A1, A2 = np.meshgrid(a, a, indexing="ij")
    r1 = math.sqrt(2.0 * i1)
    r2 = math.sqrt(2.0 * i2)
    q1 = r1 * np.cos(A1)
    p1 = -r1 * np.sin(A1)
    q2 = r2 * np.cos(A2)
    p2 = -r2 * np.sin(A2)
    f = np.zeros_like(A1)
    g = np.zeros_like(A1)
    for t in pert.terms:
        e = t.oscillator_monomial
        mono = p1 ** e[0] * q1 ** e[1] * p2 ** e[2] * q2 ** e[3]
        if t.pendulum_factor == "p3":
            f += t.coefficient * mono
        elif t.pendulum_factor == "sin":
            g += t.coefficient * mono
    return np.fft.fft2(f) / n_phi ** 2, np.fft.fft2(g) / n_phi ** 2


def invariance_residual(params: ModelParams, pert: Perturbation, nhim: NhimApprox,
                        n_check: int = 6) -> float:
    """Sup-norm of the flow-tangency defect of the graph over a sample grid.

    Defect = pendulum components of the vector field minus the derivative of
    the graph along the induced base flow (spectral derivative).
    """
    if nhim.is_zero():
        # the plane is exactly invariant iff the pendulum gradient vanishes on it
        worst = 0.0
        jm = model.critical_circle_action(params, params.c, 1)
        for i1 in np.linspace(0.15 * jm, 0.85 * jm, n_check):
            fh, gh = _forcing_harmonics(params, pert, i1, 16)
            worst = max(worst, params.eps * float(np.max(np.abs(fh)) + np.max(np.abs(gh))))
        return worst
    n1, n2 = nhim.harmonics
    worst = 0.0
    for i1 in nhim.i1_nodes[1:-1] if len(nhim.i1_nodes) > 2 else nhim.i1_nodes:
        w1 = model.omega1(params, i1)
        w2 = model.omega2(params, model.solve_i2(params, params.c, i1))
        for phi1 in np.linspace(0, TWO_PI, n_check, endpoint=False):
            for phi2 in np.linspace(0, TWO_PI, n_check, endpoint=False):
                p3, q3 = nhim.graph_point(i1, phi1, phi2)
                ps, qs = nhim._splines()
                phase = np.exp(1j * (n1 * phi1 + n2 * phi2))
                dw = 1j * (n1 * w1 + n2 * w2)
                dp_flow = float(np.real(np.sum(ps(i1) * dw * phase)))
                dq_flow = float(np.real(np.sum(qs(i1) * dw * phase)))
                q1, p1 = model.osc_embed(i1, phi1)
                i2 = model.solve_i2(params, params.c, i1)
                q2, p2 = model.osc_embed(i2, phi2)
                y = np.array([q1, p1, q2, p2, q3, p3])
                v = model.vector_field_y(params, pert, y)
                worst = max(worst, abs(v[4] - dq_flow), abs(v[5] - dp_flow))
    return worst


def nhim_build(params: ModelParams, pert: Perturbation, n_i1: int = 24,
               n_phi: int = 32, refine: bool = True,
               refine_h: float = 0.5, max_refine: int = 4) -> NhimApprox:
    """First-order invariance solve for the graph, optional flow refinement.

    Solves (D^2 - lam^2) Q = -g + D f harmonic-by-harmonic with
    D = i(n1*w1 + n2*w2); the denominators -(n.w)^2 - lam^2 never vanish, so
    the guard below cannot trip for lam > 0.  P = D Q - f.  For perturbations
    whose factors all kill the pendulum gradient on the plane (cos q3 - 1 and
    p3^2), the zero graph is exactly invariant and is returned as such.
    """
    if params.eps > 1e-2:
        raise DomainError("eps must be at most 1e-2 for the graph regime")
    if params.eps == 0.0:
        return _zero_nhim(params, pert)
    from .section import plane_invariant
    if plane_invariant(pert):
        return _zero_nhim(params, pert)

    jm = model.critical_circle_action(params, params.c, 1)
    nodes = np.linspace(0.05 * jm, 0.95 * jm, n_i1)
    lam = params.lam
    half = n_phi // 2
    n1_idx = np.array([k if k <= half else k - n_phi for k in range(n_phi)])
    p_rows = []
    q_rows = []
    for i1 in nodes:
        fh, gh = _forcing_harmonics(params, pert, i1, n_phi)
        w1 = model.omega1(params, i1)
        w2 = model.omega2(params, model.solve_i2(params, params.c, i1))
        qc = np.zeros((n_phi, n_phi), dtype=complex)
        pc = np.zeros((n_phi, n_phi), dtype=complex)
        for k1 in range(n_phi):
            for k2 in range(n_phi):
                nw = n1_idx[k1] * w1 + n1_idx[k2] * w2
                den = -(nw * nw) - lam * lam
                if abs(den) < 1e-6:
                    raise ResonanceError(
                        f"small divisor at harmonic ({n1_idx[k1]}, {n1_idx[k2]})")
                qc[k1, k2] = (-gh[k1, k2] + 1j * nw * fh[k1, k2]) / den
                pc[k1, k2] = 1j * nw * qc[k1, k2] - fh[k1, k2]
        p_rows.append(params.eps * pc)
        q_rows.append(params.eps * qc)

    # keep only harmonics that appear
    mask = np.zeros((n_phi, n_phi), dtype=bool)
    for pc, qc in zip(p_rows, q_rows):
        mask |= (np.abs(pc) > 1e-18) | (np.abs(qc) > 1e-18)
    ks = np.argwhere(mask)
    n1 = np.array([n1_idx[k[0]] for k in ks], dtype=float)
    n2 = np.array([n1_idx[k[1]] for k in ks], dtype=float)
    p_coeff = np.array([[pc[k[0], k[1]] for k in ks] for pc in p_rows])
    q_coeff = np.array([[qc[k[0], k[1]] for k in ks] for qc in q_rows])
    nh = NhimApprox(params=params, pert=pert, order="one", i1_nodes=nodes,
                    harmonics=[n1, n2], p_coeff=p_coeff, q_coeff=q_coeff)
    res = invariance_residual(params, pert, nh)
    nh.invariance_residual = res

    if refine and not nh.is_zero():
        best = nh
        for _ in range(max_refine):
            cand = _graph_transform_step(params, pert, best, refine_h)
            res_new = invariance_residual(params, pert, cand)
            cand.invariance_residual = res_new
            if res_new >= best.invariance_residual:
                break
            best = cand
        nh = best
        nh.order = "refined"
    nh.residual_flagged = nh.invariance_residual > 10.0 * params.eps ** 2
    return nh


def _graph_transform_step(params, pert, nhim: NhimApprox, h: float) -> NhimApprox:
    """One flow-and-refit pass: transport graph points for time h, read the
    pendulum pair over the transported base, refit the Fourier data."""
    n1, n2 = nhim.harmonics
    n_phi = 16
    p_rows = []
    q_rows = []
    for i1 in nhim.i1_nodes:
        i2 = model.solve_i2(params, params.c, i1)
        pg = np.zeros((n_phi, n_phi))
        qg = np.zeros((n_phi, n_phi))
        for a1i, phi1 in enumerate(TWO_PI * np.arange(n_phi) / n_phi):
            for a2i, phi2 in enumerate(TWO_PI * np.arange(n_phi) / n_phi):
                # start at the pre-image under the (unperturbed) inner flow
                w1 = model.omega1(params, i1)
                w2 = model.omega2(params, i2)
                ph1 = phi1 - w1 * h
                ph2 = phi2 - w2 * h
                p3, q3 = nhim.graph_point(i1, ph1, ph2)
                q1, p1 = model.osc_embed(i1, ph1)
                q2, p2 = model.osc_embed(i2, ph2)
                y0 = np.array([q1, p1, q2, p2, q3, p3])
                traj = engine.integrate_raw(engine.MODE_STATE6, params, pert, y0,
                                            0.0, h, 1e-11, 1e-11)
                pg[a1i, a2i] = traj.ys[-1, 5]
                qg[a1i, a2i] = (traj.ys[-1, 4] + math.pi) % TWO_PI - math.pi
        ph = np.fft.fft2(pg) / n_phi ** 2
        qh = np.fft.fft2(qg) / n_phi ** 2
        half = n_phi // 2
        idx = np.array([k if k <= half else k - n_phi for k in range(n_phi)])
        prow = np.zeros(len(n1), dtype=complex)
        qrow = np.zeros(len(n1), dtype=complex)
        for j, (m1, m2) in enumerate(zip(n1, n2)):
            k1 = int(m1) % n_phi
            k2 = int(m2) % n_phi
            if abs(idx[k1]) <= half and abs(idx[k2]) <= half:
                prow[j] = ph[k1, k2]
                qrow[j] = qh[k1, k2]
        p_rows.append(prow)
        q_rows.append(qrow)
    return NhimApprox(params=params, pert=pert, order="refined",
                      i1_nodes=nhim.i1_nodes, harmonics=nhim.harmonics,
                      p_coeff=np.array(p_rows), q_coeff=np.array(q_rows))


# ---------------------------------------------------------------------------
# lifts and fibers
# ---------------------------------------------------------------------------

_EU_NORM = None


def pendulum_eigvec(lam: float, direction: str):
    """Unit (dq3, dp3) saddle eigenvector: unstable (1, lam), stable (1, -lam)."""
    s = 1.0 if direction == "unstable" else -1.0
    n = math.hypot(1.0, lam)
    return 1.0 / n, s * lam / n


def base_lift(params: ModelParams, pert: Perturbation, nhim, base: BasePoint,
              saddle_copy: int = 0) -> np.ndarray:
    """Phase-space lift of a base point onto the manifold at energy c.

    saddle_copy shifts q3 by 2*pi*k (the excursion lands at the next copy).
    """
    p3, q3 = (0.0, 0.0) if nhim is None else nhim.graph_point(
        base.i1, base.phi1, base.phi2)
    i2 = model.solve_i2(params, params.c, base.i1)
    q1, p1 = model.osc_embed(base.i1, base.phi1)
    q2, p2 = model.osc_embed(i2, base.phi2)
    y = np.array([q1, p1, q2, p2, q3 + TWO_PI * saddle_copy, p3])
    if params.eps != 0.0:
        from .section import _energy_project
        y = _energy_project(params, pert, y, params.c)
    return y


def base_of_state(y) -> BasePoint:
    """Base coordinates of a state near the manifold (pendulum pair dropped)."""
    i1 = 0.5 * (y[0] ** 2 + y[1] ** 2)
    return BasePoint(i1, model.osc_angle(y[0], y[1]), model.osc_angle(y[2], y[3]))


def inner_flow_base(params: ModelParams, base: BasePoint, t: float) -> BasePoint:
    """Base point advanced by the induced (unperturbed) inner flow."""
    w1 = model.omega1(params, base.i1)
    w2 = model.omega2(params, model.solve_i2(params, params.c, base.i1))
    return BasePoint(base.i1, (base.phi1 + w1 * t) % TWO_PI,
                     (base.phi2 + w2 * t) % TWO_PI)


def _graph_distance(params, nhim, y) -> float:
    b = base_of_state(y)
    p3g, q3g = (0.0, 0.0) if nhim is None else nhim.graph_point(b.i1, b.phi1, b.phi2)
    dq3 = (y[4] - q3g + math.pi) % TWO_PI - math.pi
    return math.hypot(dq3, y[5] - p3g)


def fiber_footpoint(params: ModelParams, pert: Perturbation, nhim,
                    x: PhaseState, direction: str, close_tol: float = 1e-8,
                    dip_ceiling: float = 1e-4, rtol: float = 1e-12,
                    atol: float = 1e-12):
    """Asymptotic base point of the fiber through x, reported at time 0.

    Integrates forward (stable) or backward (unstable) until the orbit is
    within close_tol of the manifold, reads the shadow base point there and
    transports it back with the inner flow.  Hyperbolic roundoff
    amplification bounds the reachable closeness from far starts, so if the
    approach bottoms out above close_tol (but below dip_ceiling) the read
    happens at the closest approach instead.  Returns (footpoint, error
    estimate, read time); the estimate compares reads at the threshold and
    at half the threshold.
    """
    y0 = x.to_y()
    if _graph_distance(params, nhim, y0) > 0.5:
        raise FiberError("point outside the hyperbolic neighborhood")
    sign = 1.0 if direction == "stable" else -1.0
    t_max = 80.0 / params.lam

    times = [0.0]
    dists = [_graph_distance(params, nhim, y0)]
    bases = [base_of_state(y0)]
    t_done = 0.0
    y = y0.copy()
    while t_done < t_max:
        chunk = min(8.0 / params.lam, t_max - t_done)
        traj = engine.integrate_raw(engine.MODE_STATE6, params, pert, y,
                                    sign * t_done, sign * (t_done + chunk),
                                    rtol, atol)
        for k in range(1, len(traj.ts)):
            yk = traj.ys[k]
            times.append(abs(traj.ts[k]))
            dists.append(_graph_distance(params, nhim, yk))
            bases.append(base_of_state(yk))
        y = traj.ys[-1]
        t_done += chunk
        if min(dists) <= close_tol:
            break

    dists_arr = np.array(dists)

    def read_at(tol):
        hits = np.nonzero(dists_arr <= tol)[0]
        k = int(hits[0]) if len(hits) else int(np.argmin(dists_arr))
        return inner_flow_base(params, bases[k], -sign * times[k]), times[k], dists_arr[k]

    dip = float(np.min(dists_arr))
    if dip > close_tol and dip > dip_ceiling:
        raise FiberError(
            f"not on the local invariant manifold's fiber (closest approach {dip:.2e})")
    foot, t_hit, d_read = read_at(max(close_tol, dip))
    foot2, _, _ = read_at(max(0.5 * close_tol, dip))
    err = max(abs(foot.i1 - foot2.i1),
              abs((foot.phi1 - foot2.phi1 + math.pi) % TWO_PI - math.pi),
              abs((foot.phi2 - foot2.phi2 + math.pi) % TWO_PI - math.pi),
              0.5 * d_read)
    return foot, err, t_hit


# ---------------------------------------------------------------------------
# homoclinic shooting
# ---------------------------------------------------------------------------

@dataclass
class HomoclinicOrbit:
    branch: int
    foot_up: BasePoint           # synchronized at the matching time
    foot_down: BasePoint
    match_residual: float
    delta_u: float
    delta_s: float
    t_up: float                  # forward time from unstable launch to the apex
    t_down: float                # backward time from stable launch to the apex
    t0_shift: float              # inner-time slide of the launch base from base_up
    state_match: np.ndarray
    launch_up: np.ndarray
    launch_down: np.ndarray


def _integrate_to_apex(params, pert, y0, branch, forward=True,
                       rtol=1e-12, atol=1e-12):
    """Integrate until q3 crosses the apex (pi for branch +, -pi for branch -).

    Chunked with early stop; crossings are screened on step endpoints (q3 is
    monotone through the excursion at the node resolution).
    """
    from scipy.optimize import brentq
    target = math.pi if branch >= 0 else -math.pi
    sign = 1.0 if forward else -1.0
    t_max = 80.0 / params.lam
    t_done = 0.0
    y = np.asarray(y0, dtype=float)
    while t_done < t_max:
        chunk = min(6.0 / params.lam, t_max - t_done)
        traj = engine.integrate_raw(engine.MODE_STATE6, params, pert, y,
                                    sign * t_done, sign * (t_done + chunk),
                                    rtol, atol)
        g = traj.ys[:, 4] - target
        hits = np.nonzero(g[:-1] * g[1:] <= 0.0)[0]
        for k in hits:
            ta, tb = traj.ts[k], traj.ts[k + 1]
            span = tb - ta

            def gt(t):
                return engine._dense_eval(traj.Fs[k], traj.ys[k],
                                          (t - ta) / span)[4] - target
            lo, hi = sorted((ta, tb))
            t_star = float(brentq(gt, lo, hi, xtol=1e-14, rtol=8.9e-16))
            y_star = engine._dense_eval(traj.Fs[k], traj.ys[k], (t_star - ta) / span)
            return t_star, y_star
        y = traj.ys[-1]
        t_done += chunk
    raise ShootingError("orbit never reached the matching section")


def homoclinic_shoot(params: ModelParams, pert: Perturbation, nhim,
                     base_up: BasePoint, tau_guess: float, branch: int = +1,
                     delta0: float = 1e-6, max_iter: int = 30,
                     tol: float = 1e-9, rtol: float = 1e-12,
                     atol: float = 1e-12) -> HomoclinicOrbit:
    """Match the unstable fiber of base_up with the stable-fiber family.

    Unknowns: the launch offset along the unstable fiber (equivalently the
    excursion timing, seeded from the splitting critical point tau_guess) and
    the landing base point; the matching condition is agreement of the
    oscillator coordinates on the mid-excursion section.
    """
    if params.eps <= 0.0:
        raise DomainError("homoclinic shooting needs eps > 0")
    lam = params.lam
    equ, epu = pendulum_eigvec(lam, "unstable")
    eqs, eps_ = pendulum_eigvec(lam, "stable")
    sgn = 1.0 if branch >= 0 else -1.0

    def launch_u(ln_delta, b: BasePoint):
        d = math.exp(ln_delta)
        y = base_lift(params, pert, nhim, b, saddle_copy=0)
        y[4] += sgn * d * equ
        y[5] += sgn * d * epu
        return y

    def launch_s(b: BasePoint):
        y = base_lift(params, pert, nhim, b, saddle_copy=branch)
        # approach the landing saddle copy from inside the excursion
        y[4] -= sgn * delta0 * eqs
        y[5] -= sgn * delta0 * eps_
        return y

    # The splitting potential is quasi-periodic in tau, so the family labeled
    # by tau_guess at base_up cannot be reached by shifting tau a whole number
    # of inner periods: instead the launch base slides along base_up's inner
    # orbit by t0 so that the excursion's gamma-time at the launch equals
    # tau_guess + t0 (shift covariance of the potential).
    t_probe, _ = _integrate_to_apex(params, pert, launch_u(math.log(delta0), base_up),
                                    branch, True, rtol, atol)
    w1 = model.omega1(params, base_up.i1)
    period = TWO_PI / w1
    t0_shift = -t_probe - tau_guess
    launch_base = inner_flow_base(params, base_up, t0_shift)
    ln_seed = math.log(delta0)

    def down_state(z):
        t_dn, y_dn = _integrate_to_apex(params, pert, launch_s(z), branch, False,
                                        rtol, atol)
        return t_dn, y_dn

    ref_normal = [None]

    def match_at(ln_d):
        """Inner Gauss-Newton over the landing base at fixed fiber offset.

        Sliding the launch along the fiber is a near-gauge direction (a time
        shift compensable by the landing angles), so it is held fixed here;
        the signed miss along the normal to the landing family is the outer
        root function that selects the homoclinic orbit.  The landing seed
        comes from this offset's own forward apex via the unperturbed
        coincidence.
        """
        t_up, y_up = _integrate_to_apex(params, pert, launch_u(ln_d, launch_base),
                                        branch, True, rtol, atol)
        a = y_up[:4]
        z_seed = inner_flow_base(params, base_of_state(y_up), t_probe)
        jm = model.critical_circle_action(params, params.c, 1)

        def clamp(zv):
            zv = zv.copy()
            zv[0] = min(max(zv[0], 1e-4 * jm), 0.9999 * jm)
            return zv

        z = clamp(np.array([z_seed.i1, z_seed.phi1, z_seed.phi2]))
        steps = np.array([1e-7, 1e-6, 1e-6])
        t_dn, y_dn = down_state(BasePoint(*z))
        r = y_dn[:4] - a
        # the landing map is nearly affine over these scales: one tangent
        # evaluation, then Gauss-Newton steps reusing it
        T = np.zeros((4, 3))
        for j in range(3):
            z2 = z.copy()
            z2[j] += steps[j]
            _, y2 = down_state(BasePoint(*z2))
            T[:, j] = (y2[:4] - y_dn[:4]) / steps[j]
        for _ in range(6):
            dz, *_ = np.linalg.lstsq(T, -r, rcond=None)
            z = clamp(z + dz)
            t_dn, y_dn = down_state(BasePoint(*z))
            r = y_dn[:4] - a
            if np.max(np.abs(dz)) < 1e-11:
                break
        # complete the 3 tangent columns to an orthonormal basis of R^4;
        # the leftover column is the unit normal to the landing family
        full, _ = np.linalg.qr(np.hstack([T, np.eye(4)]))
        n = full[:, 3]
        if ref_normal[0] is None:
            ref_normal[0] = n
        if float(n @ ref_normal[0]) < 0:
            n = -n
        miss = float(n @ (a - y_dn[:4]))
        return miss, (t_up, t_dn, y_up, y_dn, BasePoint(*z),
                      float(np.max(np.abs(r))))

    # outer scalar root on the fiber offset over one excursion-timing period
    half_span = 0.5 * lam * period
    ln_grid = ln_seed + np.linspace(-half_span, half_span, 9)
    misses = []
    infos = []
    for ln_d in ln_grid:
        m, info = match_at(ln_d)
        misses.append(m)
        infos.append(info)
    bracket = None
    order = np.argsort(np.abs(ln_grid - ln_seed))
    for idx in order:
        for j in (idx - 1, idx):
            if 0 <= j < len(ln_grid) - 1 and misses[j] * misses[j + 1] < 0:
                bracket = (ln_grid[j], ln_grid[j + 1], misses[j], misses[j + 1])
                break
        if bracket:
            break
    if bracket is None:
        raise ShootingError("no sign change of the stable-family miss "
                            "(transversality failure in this window)",
                            residual=float(np.min(np.abs(misses))))
    lo, hi, m_lo, m_hi = bracket
    for it in range(max_iter):
        mid = lo + (hi - lo) * m_lo / (m_lo - m_hi)   # secant within bracket
        if not (min(lo, hi) < mid < max(lo, hi)):
            mid = 0.5 * (lo + hi)
        m_mid, info = match_at(mid)
        if info[5] <= tol:
            t_up, t_dn, y_up, y_dn, z_fin, res = info
            foot_up = inner_flow_base(params, launch_base, t_up)
            foot_down = inner_flow_base(params, z_fin, t_dn)
            return HomoclinicOrbit(
                branch=branch, foot_up=foot_up, foot_down=foot_down,
                match_residual=res, delta_u=math.exp(mid), delta_s=delta0,
                t_up=t_up, t_down=t_dn, t0_shift=t0_shift, state_match=y_up,
                launch_up=launch_u(mid, launch_base), launch_down=launch_s(z_fin))
        if m_mid * m_lo < 0:
            hi, m_hi = mid, m_mid
        else:
            lo, m_lo = mid, m_mid
    raise ShootingError("outer root iteration did not converge",
                        residual=float(info[5]))


def scattering_map_direct(params: ModelParams, pert: Perturbation, nhim,
                          base_up: BasePoint, tau_guess: float,
                          branch: int = +1, **kw) -> tuple:
    """Wave-map composition at base_up: returns (foot_down at the matching
    time pulled back so foot_up aligns with base_up, HomoclinicOrbit).

    Both footpoints are read at the matching-section time; the returned image
    is transported by the inner flow so that its time origin matches base_up.
    """
    orbit = homoclinic_shoot(params, pert, nhim, base_up, tau_guess, branch, **kw)
    image = inner_flow_base(params, orbit.foot_down, -(orbit.t_up + orbit.t0_shift))
    return image, orbit


def transversality_angle(params: ModelParams, pert: Perturbation, nhim,
                         orbit: HomoclinicOrbit, step: float = 1e-6,
                         rtol: float = 1e-12, atol: float = 1e-12) -> float:
    """Largest principal angle between the manifold tangents at the match.

    Both tangent spaces contain the homoclinic-channel directions (angles 0);
    the remaining principal angle measures the transversal splitting.
    """
    branch = orbit.branch

    def up_point(vec):
        ln_d, i1, f1, f2 = vec
        y = base_lift(params, pert, nhim, BasePoint(i1, f1, f2), 0)
        sgn = 1.0 if branch >= 0 else -1.0
        equ, epu = pendulum_eigvec(params.lam, "unstable")
        d = math.exp(ln_d)
        y[4] += sgn * d * equ
        y[5] += sgn * d * epu
        _, y_ap = _integrate_to_apex(params, pert, y, branch, True, rtol, atol)
        return y_ap

    def dn_point(vec):
        ln_d, i1, f1, f2 = vec
        sgn = 1.0 if branch >= 0 else -1.0
        eqs, eps_ = pendulum_eigvec(params.lam, "stable")
        y = base_lift(params, pert, nhim, BasePoint(i1, f1, f2), branch)
        d = math.exp(ln_d)
        y[4] -= sgn * d * eqs
        y[5] -= sgn * d * eps_
        _, y_ap = _integrate_to_apex(params, pert, y, branch, False, rtol, atol)
        return y_ap

    vec_u = np.array([math.log(orbit.delta_u), orbit.foot_up.i1,
                      (orbit.foot_up.phi1 - model.omega1(params, orbit.foot_up.i1) * orbit.t_up) % TWO_PI,
                      (orbit.foot_up.phi2 - model.omega2(params, model.solve_i2(params, params.c, orbit.foot_up.i1)) * orbit.t_up) % TWO_PI])
    vec_d = np.array([math.log(orbit.delta_s), orbit.foot_down.i1,
                      (orbit.foot_down.phi1 - model.omega1(params, orbit.foot_down.i1) * orbit.t_down) % TWO_PI,
                      (orbit.foot_down.phi2 - model.omega2(params, model.solve_i2(params, params.c, orbit.foot_down.i1)) * orbit.t_down) % TWO_PI])

    def tangent(fn, vec):
        base = fn(vec)
        cols = []
        for j in range(4):
            v2 = vec.copy()
            v2[j] += step
            cols.append((fn(v2) - base) / step)
        return np.array(cols).T  # 6 x 4

    U = tangent(up_point, vec_u)
    V = tangent(dn_point, vec_d)

    def orth(M, rank=3):
        q, s, _ = np.linalg.svd(M, full_matrices=False)
        return q[:, :rank]

    qu = orth(U)
    qv = orth(V)
    sv = np.linalg.svd(qu.T @ qv, compute_uv=False)
    sv = np.clip(sv, -1.0, 1.0)
    angles = np.arccos(sv)
    return float(np.max(angles))
