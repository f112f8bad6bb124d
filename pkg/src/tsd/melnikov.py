"""Splitting potential along the pendulum separatrices: adaptive quadrature
with analytic tail bounds, critical points, first-order splitting distance
and the predicted action shift of the scattering map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from . import model
from .model import DomainError, ModelParams, Perturbation

TWO_PI = 2.0 * math.pi


class NoCriticalPointError(RuntimeError):
    """The splitting potential has no critical point in the scanned window."""


class DegenerateCriticalPointError(RuntimeError):
    """Second derivative at the critical point below the nondegeneracy floor."""


@dataclass(frozen=True)
class MelnikovSample:
    I1: float
    phi1: float
    phi2: float
    tau: float
    branch: int
    value: float
    d_tau: float
    d2_tau: float
    d_phi1: float
    d_tau_phi1: float
    quad_error: float


def sech_cos_integral(omega: float, lam: float) -> float:
    """Closed form of the full-line integral of sech^2(lam*s) cos(omega*s)."""
    if omega == 0.0:
        return 2.0 / lam
    return (math.pi * omega / lam ** 2) / math.sinh(math.pi * omega / (2.0 * lam))


def _inner_frequencies(params: ModelParams, i1: float):
    i2 = model.solve_i2(params, params.c, i1)
    return i2, model.omega1(params, i1), model.omega2(params, i2)


def _osc_factors(i1, i2, phi1, phi2, w1, w2, t):
    """Oscillator coordinates and their angle-time derivatives at inner time t."""
    a1 = phi1 + w1 * t
    a2 = phi2 + w2 * t
    r1 = math.sqrt(2.0 * i1)
    r2 = math.sqrt(2.0 * i2)
    q1, p1 = r1 * math.cos(a1), -r1 * math.sin(a1)
    q2, p2 = r2 * math.cos(a2), -r2 * math.sin(a2)
    return q1, p1, q2, p2


def _mono_chain(expo, i1, i2, phi1, phi2, w1, w2, t, order_t, dphi1=False):
    """Monomial p1^e1 q1^e2 p2^e3 q2^e4 on the inner orbit and derivatives.

    order_t 0/1/2 selects m, dm/dt, d2m/dt2; with dphi1 the same applied to
    dm/dphi1 (order_t 0 or 1).  Uses dq/dt = w p, dp/dt = -w q and
    dq/dphi1 = p1, dp1/dphi1 = -q1 on oscillator 1.
    """
    q1, p1, q2, p2 = _osc_factors(i1, i2, phi1, phi2, w1, w2, t)
    vals = [p1, q1, p2, q2]
    dots = [-w1 * q1, w1 * p1, -w2 * q2, w2 * p2]      # d/dt of (p1,q1,p2,q2)
    dphis = [-q1, p1, 0.0, 0.0]                        # d/dphi1
    e = expo

    if order_t == 0 and not dphi1:
        v = 1.0
        for s in range(4):
            if e[s]:
                v *= vals[s] ** e[s]
        return v
    if order_t == 1 and not dphi1:
        total = 0.0
        for s in range(4):
            if e[s]:
                v = e[s] * dots[s]
                for r in range(4):
                    ee = e[r] - (1 if r == s else 0)
                    if ee:
                        v *= vals[r] ** ee
                total += v
        return total
    if dphi1 and order_t == 0:
        total = 0.0
        for s in range(2):
            if e[s]:
                v = e[s] * dphis[s]
                for r in range(4):
                    ee = e[r] - (1 if r == s else 0)
                    if ee:
                        v *= vals[r] ** ee
                total += v
        return total
    if order_t == 2 and not dphi1:
        ddots = [-w1 * w1 * p1, -w1 * w1 * q1, -w2 * w2 * p2, -w2 * w2 * q2]
        total = 0.0
        for s in range(4):
            if not e[s]:
                continue
            v = e[s] * ddots[s]
            for r in range(4):
                ee = e[r] - (1 if r == s else 0)
                if ee:
                    v *= vals[r] ** ee
            total += v
            if e[s] >= 2:
                v = e[s] * (e[s] - 1) * dots[s] * dots[s] * vals[s] ** (e[s] - 2)
                for r in range(4):
                    if r != s and e[r]:
                        v *= vals[r] ** e[r]
                total += v
            for r in range(4):
                if r != s and e[r]:
                    v = e[s] * dots[s] * e[r] * dots[r]
                    v *= vals[s] ** (e[s] - 1) * vals[r] ** (e[r] - 1)
                    for u in range(4):
                        if u != s and u != r and e[u]:
                            v *= vals[u] ** e[u]
                    total += v
        return total
    if dphi1 and order_t == 1:
        # d/dt of dm/dphi1 by second-order product rule over (s in osc1, r any)
        ddots_phi = [-w1 * p1, -w1 * q1, 0.0, 0.0]     # d/dt of dphis
        total = 0.0
        for s in range(2):
            if not e[s]:
                continue
            v = e[s] * ddots_phi[s]
            for r in range(4):
                ee = e[r] - (1 if r == s else 0)
                if ee:
                    v *= vals[r] ** ee
            total += v
            if e[s] >= 2:
                v = e[s] * (e[s] - 1) * dphis[s] * dots[s] * vals[s] ** (e[s] - 2)
                for r in range(4):
                    if r != s and e[r]:
                        v *= vals[r] ** e[r]
                total += v
            for r in range(4):
                if r != s and e[r]:
                    v = e[s] * dphis[s] * e[r] * dots[r]
                    v *= vals[s] ** (e[s] - 1) * vals[r] ** (e[r] - 1)
                    for u in range(4):
                        if u != s and u != r and e[u]:
                            v *= vals[u] ** e[u]
                    total += v
        return total
    raise ValueError("unsupported derivative request")


_FACTOR_TAIL = {
    "cos_m1": (8.0, 2.0),    # amplitude multiplier, decay rate in units of lam
    "sin": (4.0, 1.0),
    "p3": (4.0, 1.0),        # times lam
    "p3sq": (16.0, 2.0),     # times lam^2
}


def _tail_bound(params: ModelParams, pert: Perturbation, i1: float, T: float) -> float:
    lam = params.lam
    i2 = model.solve_i2(params, params.c, i1)
    total = 0.0
    for t in pert.terms:
        amp, rate = _FACTOR_TAIL[t.pendulum_factor]
        if t.pendulum_factor == "p3":
            amp *= lam
        elif t.pendulum_factor == "p3sq":
            amp *= lam * lam
        e = t.oscillator_monomial
        mbound = (2 * i1) ** (0.5 * (e[0] + e[1])) * (2 * i2) ** (0.5 * (e[2] + e[3]))
        r = rate * lam
        total += abs(t.coefficient) * amp * mbound * 2.0 * math.exp(-r * T) / r
    return total


def _choose_t_cut(params: ModelParams, pert: Perturbation, i1: float, tol: float) -> float:
    lam = params.lam
    T = 10.0 / lam
    T_max = 60.0 / lam
    while T < T_max and _tail_bound(params, pert, i1, T) > 0.25 * tol:
        T += 2.0 / lam
    if _tail_bound(params, pert, i1, T) > 0.25 * tol:
        raise DomainError("tail bound exceeds the tolerance at the maximal cutoff")
    return T


def melnikov_potential(params: ModelParams, pert: Perturbation, i1: float,
                       phi1: float, phi2: float, tau: float, branch: int = +1,
                       tol: float = 1e-10) -> MelnikovSample:
    """Splitting potential and its tau / phi1 derivatives by quadrature.

    The integral runs along the separatrix branch in the shifted variable s
    (pendulum factors evaluated at gamma(s), oscillator monomials on the
    inner orbit at time s - tau), so the integrand decay is centered at 0.
    """
    if tol < 1e-12:
        raise DomainError("tol must be at least 1e-12")
    jm = model.critical_circle_action(params, params.c, 1)
    if not (0.0 < i1 < jm):
        raise DomainError("I1 outside the open disk range")
    i2, w1, w2 = _inner_frequencies(params, i1)
    lam = params.lam
    T = _choose_t_cut(params, pert, i1, tol)
    coef, fid, expo = pert.packed()
    names = [t.pendulum_factor for t in pert.terms]

    def integrand(s, order_t, dphi1):
        p3, q3 = model.pendulum_separatrix(lam, s, branch)
        total = 0.0
        for k, term in enumerate(pert.terms):
            f = model._factor_value(int(fid[k]), q3, p3)
            if f == 0.0:
                continue
            m = _mono_chain(term.oscillator_monomial, i1, i2, phi1, phi2,
                            w1, w2, s - tau, order_t, dphi1)
            total += coef[k] * f * m
        return total

    def integrate(order_t, dphi1, sign):
        val, err = quad(lambda s: sign * integrand(s, order_t, dphi1), -T, T,
                        limit=400, epsabs=0.25 * tol, epsrel=0.0)
        return val, err

    value, e0 = integrate(0, False, 1.0)
    d_tau, e1 = integrate(1, False, -1.0)       # d/dtau = -d/dt on the inner orbit
    d2_tau, e2 = integrate(2, False, 1.0)
    d_phi1, e3 = integrate(0, True, 1.0)
    d_tau_phi1, e4 = integrate(1, True, -1.0)
    quad_error = max(e0, e1, e2, e3, e4) + _tail_bound(params, pert, i1, T)
    return MelnikovSample(I1=i1, phi1=phi1, phi2=phi2, tau=tau, branch=branch,
                          value=value, d_tau=d_tau, d2_tau=d2_tau, d_phi1=d_phi1,
                          d_tau_phi1=d_tau_phi1, quad_error=quad_error)


def sech2_q1_closed_form(params: ModelParams, i1: float, phi1: float, tau: float):
    """Closed form for the coupling (cos q3 - 1)*q1: value and derivatives."""
    _, w1, _ = _inner_frequencies(params, i1)
    C = sech_cos_integral(w1, params.lam)
    amp = -2.0 * math.sqrt(2.0 * i1) * C
    val = amp * math.cos(phi1 - w1 * tau)
    d_tau = amp * w1 * math.sin(phi1 - w1 * tau)
    d2_tau = -amp * w1 * w1 * math.cos(phi1 - w1 * tau)
    d_phi1 = -amp * math.sin(phi1 - w1 * tau)
    return val, d_tau, d2_tau, d_phi1


# ---------------------------------------------------------------------------
# exact harmonic expansion (fast path; validated against the quadrature)
# ---------------------------------------------------------------------------

def _factor_transform(name: str, omega: float, lam: float, branch: int) -> complex:
    """Full-line transform int f(gamma(s)) e^{i omega s} ds, closed form.

    gamma is the separatrix branch; cos q3 - 1 and p3^2 are even under the
    branch flip, sin q3 and p3 odd.
    """
    x = math.pi * omega / (2.0 * lam)
    sign = 1.0 if branch >= 0 else -1.0
    if name == "cos_m1":
        if omega == 0.0:
            return complex(-4.0 / lam)
        return complex(-2.0 * (math.pi * omega / lam ** 2) / math.sinh(x))
    if name == "p3sq":
        if omega == 0.0:
            return complex(8.0 * lam)
        return complex(4.0 * math.pi * omega / math.sinh(x))
    if name == "p3":
        return complex(sign * 2.0 * math.pi / math.cosh(x))
    if name == "sin":
        return complex(0.0, sign * -2.0 * math.pi * omega / lam ** 2 / math.cosh(x))
    raise DomainError(f"unknown factor {name}")


def _monomial_harmonics(expo, i1, i2):
    """Fourier coefficients of the monomial over the two inner angles.

    Returns (n1s, n2s, coeffs): m(angles) = sum coeffs * e^{i(n1 a1 + n2 a2)}.
    """
    d1 = expo[0] + expo[1]
    d2 = expo[2] + expo[3]
    n1g = 2 * d1 + 1
    n2g = 2 * d2 + 1
    a1 = 2.0 * math.pi * np.arange(n1g) / n1g
    a2 = 2.0 * math.pi * np.arange(n2g) / n2g
    A1, A2 = np.meshgrid(a1, a2, indexing="ij")
    r1 = math.sqrt(2.0 * i1)
    r2 = math.sqrt(2.0 * i2)
    vals = ((-r1 * np.sin(A1)) ** expo[0] * (r1 * np.cos(A1)) ** expo[1]
            * (-r2 * np.sin(A2)) ** expo[2] * (r2 * np.cos(A2)) ** expo[3])
    spec = np.fft.fft2(vals) / (n1g * n2g)
    n1s, n2s, coeffs = [], [], []
    for k1 in range(n1g):
        n1 = k1 if k1 <= d1 else k1 - n1g
        for k2 in range(n2g):
            n2 = k2 if k2 <= d2 else k2 - n2g
            cval = spec[k1, k2]
            if abs(cval) > 1e-14:
                n1s.append(n1)
                n2s.append(n2)
                coeffs.append(cval)
    return np.array(n1s), np.array(n2s), np.array(coeffs)


@dataclass(frozen=True)
class SplittingExpansion:
    """Exact finite-harmonic form of the splitting potential at fixed I1."""

    i1: float
    branch: int
    w1: float
    w2: float
    n1: np.ndarray
    n2: np.ndarray
    amp: np.ndarray          # complex amplitudes including the factor transform

    def _phases(self, phi1, phi2, tau):
        return (self.n1 * (phi1 - self.w1 * tau)
                + self.n2 * (phi2 - self.w2 * tau))

    def value(self, phi1, phi2, tau) -> float:
        return float(np.real(np.sum(self.amp * np.exp(1j * self._phases(phi1, phi2, tau)))))

    def d_tau(self, phi1, phi2, tau) -> float:
        nw = self.n1 * self.w1 + self.n2 * self.w2
        return float(np.real(np.sum(self.amp * (-1j * nw)
                                    * np.exp(1j * self._phases(phi1, phi2, tau)))))

    def d2_tau(self, phi1, phi2, tau) -> float:
        nw = self.n1 * self.w1 + self.n2 * self.w2
        return float(np.real(np.sum(self.amp * (-(nw ** 2))
                                    * np.exp(1j * self._phases(phi1, phi2, tau)))))

    def d_phi1(self, phi1, phi2, tau) -> float:
        return float(np.real(np.sum(self.amp * (1j * self.n1)
                                    * np.exp(1j * self._phases(phi1, phi2, tau)))))

    def d_tau_phi1(self, phi1, phi2, tau) -> float:
        nw = self.n1 * self.w1 + self.n2 * self.w2
        return float(np.real(np.sum(self.amp * (self.n1 * nw)
                                    * np.exp(1j * self._phases(phi1, phi2, tau)))))

    def d2_phi1(self, phi1, phi2, tau) -> float:
        return float(np.real(np.sum(self.amp * (-(self.n1 ** 2))
                                    * np.exp(1j * self._phases(phi1, phi2, tau)))))


def harmonic_expansion(params: ModelParams, pert: Perturbation, i1: float,
                       branch: int = +1) -> SplittingExpansion:
    """Assemble the exact harmonic form: monomial spectra times the
    closed-form separatrix transforms evaluated at the combination
    frequencies n1*w1 + n2*w2."""
    i2, w1, w2 = _inner_frequencies(params, i1)
    acc = {}
    for t in pert.terms:
        n1s, n2s, coeffs = _monomial_harmonics(t.oscillator_monomial, i1, i2)
        for n1, n2, m_hat in zip(n1s, n2s, coeffs):
            omega = n1 * w1 + n2 * w2
            fhat = _factor_transform(t.pendulum_factor, omega, params.lam, branch)
            key = (int(n1), int(n2))
            acc[key] = acc.get(key, 0.0) + t.coefficient * m_hat * fhat
    keys = sorted(acc.keys())
    n1 = np.array([k[0] for k in keys], dtype=float)
    n2 = np.array([k[1] for k in keys], dtype=float)
    amp = np.array([acc[k] for k in keys])
    return SplittingExpansion(i1=float(i1), branch=branch, w1=w1, w2=w2,
                              n1=n1, n2=n2, amp=amp)


def critical_tau_all(params: ModelParams, pert: Perturbation, i1: float,
                     phi1: float, phi2: float, branch: int = +1,
                     n_scan: int = 64, tol: float = 1e-10):
    """All nondegenerate roots of dM/dtau in one inner period [0, 2*pi/omega1).

    The scan runs on the exact harmonic expansion; each bracketed root is
    polished and validated with the quadrature evaluator.  Returns a list of
    (tau_star, d2_tau) pairs; raises NoCriticalPointError when the scan finds
    no sign change, DegenerateCriticalPointError when a refined root has
    |d2M/dtau^2| below 1e-8 times the scan scale.
    """
    exp = harmonic_expansion(params, pert, i1, branch)
    period = TWO_PI / exp.w1
    taus = np.linspace(0.0, period, n_scan, endpoint=False)
    dvals = np.array([exp.d_tau(phi1, phi2, t) for t in taus])
    scale = float(np.max(np.abs(dvals)))
    if scale <= 1e-14 * max(1.0, float(np.max(np.abs(exp.amp))) if len(exp.amp) else 1.0):
        raise NoCriticalPointError("splitting potential is constant in tau")
    d2scale = float(np.max(np.abs([exp.d2_tau(phi1, phi2, t) for t in taus]))) or scale
    roots = []
    for k in range(n_scan):
        va = dvals[k]
        vb = dvals[(k + 1) % n_scan]
        if va * vb >= 0.0 and va != 0.0:
            continue
        lo = taus[k]
        hi = taus[k] + period / n_scan
        t_cur = 0.5 * (lo + hi)
        for _ in range(80):
            d1v = exp.d_tau(phi1, phi2, t_cur)
            if abs(d1v) <= 1e-13 * scale:
                break
            d2v = exp.d2_tau(phi1, phi2, t_cur)
            t_new = t_cur - d1v / d2v if d2v != 0.0 else math.nan
            if not (lo <= t_new <= hi):
                if d1v * va > 0:
                    lo = t_cur
                else:
                    hi = t_cur
                t_new = 0.5 * (lo + hi)
            t_cur = t_new
        # quadrature polish and validation (dual route)
        s = melnikov_potential(params, pert, i1, phi1, phi2, t_cur, branch, tol)
        if s.d2_tau != 0.0:
            t_cur = t_cur - s.d_tau / s.d2_tau
            s = melnikov_potential(params, pert, i1, phi1, phi2, t_cur, branch, tol)
        if abs(s.d_tau) > 1e-10 * scale:
            continue
        if abs(s.d2_tau) < 1e-8 * d2scale:
            raise DegenerateCriticalPointError(
                f"degenerate critical point at tau={t_cur:.6g}")
        roots.append((float(t_cur), float(s.d2_tau)))
    if not roots:
        raise NoCriticalPointError("no critical point in the scanned window")
    return roots


def critical_tau(params: ModelParams, pert: Perturbation, i1: float, phi1: float,
                 phi2: float, branch: int = +1, tol: float = 1e-10):
    """First nondegenerate critical point (tau_star, d2_tau) in the window."""
    return critical_tau_all(params, pert, i1, phi1, phi2, branch, tol=tol)[0]


def splitting_distance(params: ModelParams, pert: Perturbation, i1: float,
                       phi1: float, phi2: float, tau: float, eps: float,
                       branch: int = +1, tol: float = 1e-10) -> float:
    """First-order transversal splitting -eps * dM/dtau at the given section."""
    s = melnikov_potential(params, pert, i1, phi1, phi2, tau, branch, tol)
    return -eps * s.d_tau


def scattering_shift(params: ModelParams, pert: Perturbation, i1: float,
                     phi1: float, phi2: float, branch: int = +1,
                     eps: float = None, tau_star: float = None,
                     tol: float = 1e-10):
    """Predicted I1 change of the scattering map at the critical point.

    Returns (delta_reduced, delta_literal, tau_star).  The reduced-potential
    first-order shift is -eps*dM/dphi1|tau* (the action drift
    -eps*dH1/dphi1 integrated along the unperturbed homoclinic orbit); the
    printed bracket form -eps*d/dtau({I1, M})|tau* = eps*d2M/(dtau dphi1)
    is kept for comparison (the reduced form is validated against the direct
    map downstream and used by the itinerary machinery).
    """
    eps = params.eps if eps is None else eps
    if eps == 0.0:
        return 0.0, 0.0, tau_star if tau_star is not None else 0.0
    if tau_star is None:
        tau_star, _ = critical_tau(params, pert, i1, phi1, phi2, branch, tol=tol)
    s = melnikov_potential(params, pert, i1, phi1, phi2, tau_star, branch, tol)
    return -eps * s.d_phi1, eps * s.d_tau_phi1, tau_star


@dataclass(frozen=True)
class CoverageRow:
    I1: float
    n_families: int
    has_positive: bool
    has_negative: bool
    max_shift: float
    min_shift: float


def coverage_report(params: ModelParams, pert: Perturbation, eps: float,
                    i1_grid, n_phi: int = 6, branches=(+1, -1),
                    tol: float = 1e-9):
    """Per action level: do the scattering families produce shifts of both signs?

    Samples (phi1, phi2) on an n_phi x n_phi grid; each nondegenerate critical
    point is one homoclinic family.  Empty coverage is a valid outcome.
    """
    rows = []
    phis = np.linspace(0.0, TWO_PI, n_phi, endpoint=False)
    for i1 in i1_grid:
        shifts = []
        n_fam = 0
        for branch in branches:
            for phi1 in phis:
                for phi2 in phis:
                    try:
                        roots = critical_tau_all(params, pert, i1, phi1, phi2,
                                                 branch, tol=tol)
                    except (NoCriticalPointError, DegenerateCriticalPointError):
                        continue
                    n_fam = max(n_fam, len(roots))
                    for tau_star, _ in roots:
                        red, _, _ = scattering_shift(params, pert, i1, phi1, phi2,
                                                     branch, eps, tau_star, tol)
                        shifts.append(red)
        if shifts:
            arr = np.array(shifts)
            zero_floor = 1e-12 * max(1.0, float(np.max(np.abs(arr))))
            rows.append(CoverageRow(
                I1=float(i1), n_families=n_fam,
                has_positive=bool(np.any(arr > zero_floor)),
                has_negative=bool(np.any(arr < -zero_floor)),
                max_shift=float(np.max(arr)), min_shift=float(np.min(arr))))
        else:
            rows.append(CoverageRow(I1=float(i1), n_families=0,
                                    has_positive=False, has_negative=False,
                                    max_shift=0.0, min_shift=0.0))
    return rows
