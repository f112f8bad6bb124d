"""Hamiltonian family: two non-harmonic oscillators weakly coupled to a pendulum.

The unperturbed energy splits as

    H00(q1,p1,q2,p2) = a1*(p1^2+q1^2)/2 + a2*(p2^2+q2^2)/2
                       + (b1/2)*((p1^2+q1^2)/2)^2 + (b2/2)*((p2^2+q2^2)/2)^2
    H01(q3,p3)       = p3^2/2 + lam^2*(cos q3 - 1)

and the coupling eps*H1 is a sum of terms, each the product of a pendulum
factor from {cos q3 - 1, sin q3, p3, p3^2} and a monomial in the oscillator
variables.  Every structural quantity with a closed form (action-angle
change, iso-energetic determinant, critical circles, separatrix) lives here.

Internally states are ordered y = (q1, p1, q2, p2, q3, p3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# Pendulum factor codes shared with the integrator cores.
FACTOR_NAMES = ("cos_m1", "sin", "p3", "p3sq")
FACTOR_COS_M1, FACTOR_SIN, FACTOR_P3, FACTOR_P3SQ = range(4)


class DomainError(ValueError):
    """Input outside an operation's stated domain."""


@dataclass(frozen=True)
class ModelParams:
    """Constants of the Hamiltonian family.

    a1, a2 : linear oscillator frequencies (>0, a1 != a2)
    b1, b2 : quartic coefficients (>0, b1 != b2)
    lam    : pendulum saddle exponent (>0)
    c      : energy value of the oscillator subsystem (>0)
    eps    : perturbation size (>=0)
    """

    a1: float
    a2: float
    b1: float
    b2: float
    lam: float
    c: float
    eps: float = 0.0

    def __post_init__(self):
        vals = (self.a1, self.a2, self.b1, self.b2, self.lam, self.c, self.eps)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError("non-finite parameter")
        if min(self.a1, self.a2, self.b1, self.b2, self.lam) <= 0.0:
            raise DomainError("a1, a2, b1, b2, lam must be strictly positive")
        if self.a1 == self.a2:
            raise DomainError("a1 must differ from a2")
        if self.b1 == self.b2:
            raise DomainError("b1 must differ from b2")
        if self.c <= 0.0:
            raise DomainError("c must be positive")
        if self.eps < 0.0:
            raise DomainError("eps must be nonnegative")

    def packed(self) -> np.ndarray:
        return np.array([self.a1, self.a2, self.b1, self.b2, self.lam, self.eps])

    def with_eps(self, eps: float) -> "ModelParams":
        return ModelParams(self.a1, self.a2, self.b1, self.b2, self.lam, self.c, eps)


#: Parameter set used by the tests, docs and shipped configs.  The boundary
#: circle of the surface of section is the oscillator-1 circle; a1 > a2 makes
#: it the short (index-3) spanning orbit for small c.
DEFAULT_PARAMS = ModelParams(a1=1.6, a2=1.0, b1=0.8, b2=0.4, lam=1.0, c=0.2, eps=0.0)


@dataclass(frozen=True)
class PhaseState:
    """A point (p1,p2,p3,q1,q2,q3) of the six-dimensional phase space.

    q3 lives on the real line internally; wrap-around is presentation only.
    """

    p: tuple
    q: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        q = tuple(float(v) for v in self.q)
        if len(p) != 3 or len(q) != 3:
            raise DomainError("p and q must be 3-vectors")
        if not all(math.isfinite(v) for v in p + q):
            raise DomainError("non-finite phase-space component")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def to_y(self) -> np.ndarray:
        q, p = self.q, self.p
        return np.array([q[0], p[0], q[1], p[1], q[2], p[2]])

    @staticmethod
    def from_y(y) -> "PhaseState":
        y = np.asarray(y, dtype=float)
        return PhaseState(p=(y[1], y[3], y[5]), q=(y[0], y[2], y[4]))


@dataclass(frozen=True)
class ActionAngle:
    """Oscillator actions and angles; angles in [0, 2*pi)."""

    I1: float
    I2: float
    phi1: float
    phi2: float
    degenerate1: bool = False
    degenerate2: bool = False


@dataclass(frozen=True)
class PerturbationTerm:
    coefficient: float
    pendulum_factor: str
    oscillator_monomial: tuple

    def __post_init__(self):
        if self.pendulum_factor not in FACTOR_NAMES:
            raise DomainError(f"unknown pendulum factor {self.pendulum_factor!r}")
        mono = tuple(int(e) for e in self.oscillator_monomial)
        if len(mono) != 4 or any(e < 0 for e in mono):
            raise DomainError("oscillator monomial needs 4 nonnegative exponents")
        object.__setattr__(self, "oscillator_monomial", mono)


@dataclass(frozen=True)
class Perturbation:
    """Structured H1: sum of coefficient * pendulum factor * oscillator monomial.

    The monomial exponents (e1,e2,e3,e4) stand for p1^e1 q1^e2 p2^e3 q2^e4.
    Every admissible pendulum factor vanishes at (p3,q3)=(0,0), so H1 is well
    defined (and zero) on the unperturbed oscillator plane.
    """

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        for t in self.terms:
            if not isinstance(t, PerturbationTerm):
                raise DomainError("terms must be PerturbationTerm instances")

    def packed(self):
        n = len(self.terms)
        coef = np.zeros(n)
        fid = np.zeros(n, dtype=np.int32)
        expo = np.zeros((n, 4), dtype=np.int32)
        for i, t in enumerate(self.terms):
            coef[i] = t.coefficient
            fid[i] = FACTOR_NAMES.index(t.pendulum_factor)
            expo[i] = t.oscillator_monomial
        return coef, fid, expo

    @staticmethod
    def zero() -> "Perturbation":
        return Perturbation(terms=())


def pert_from_spec(spec_list) -> Perturbation:
    """Build a Perturbation from (coefficient, factor_name, exponent-4-tuple) triples."""
    return Perturbation(terms=tuple(
        PerturbationTerm(float(c), str(f), tuple(e)) for c, f, e in spec_list
    ))


#: Coupling used by the global-diffusion experiments: (cos q3 - 1)*(q1 + q1*q2).
TWO_HARMONIC_PERT = pert_from_spec([
    (1.0, "cos_m1", (0, 1, 0, 0)),
    (1.0, "cos_m1", (0, 1, 0, 1)),
])

#: Single-harmonic coupling (cos q3 - 1)*q1 with a closed-form splitting integral.
SECH2_PERT = pert_from_spec([(1.0, "cos_m1", (0, 1, 0, 0))])


# ---------------------------------------------------------------------------
# pendulum factor table
# ---------------------------------------------------------------------------

def _factor_value(fid: int, q3: float, p3: float) -> float:
    if fid == FACTOR_COS_M1:
        return math.cos(q3) - 1.0
    if fid == FACTOR_SIN:
        return math.sin(q3)
    if fid == FACTOR_P3:
        return p3
    return p3 * p3


def _factor_derivs(fid: int, q3: float, p3: float):
    """Return (f, df/dq3, df/dp3, d2f/dq3^2, d2f/dq3dp3, d2f/dp3^2)."""
    if fid == FACTOR_COS_M1:
        return (math.cos(q3) - 1.0, -math.sin(q3), 0.0, -math.cos(q3), 0.0, 0.0)
    if fid == FACTOR_SIN:
        return (math.sin(q3), math.cos(q3), 0.0, -math.sin(q3), 0.0, 0.0)
    if fid == FACTOR_P3:
        return (p3, 0.0, 1.0, 0.0, 0.0, 0.0)
    return (p3 * p3, 0.0, 2.0 * p3, 0.0, 0.0, 2.0)


def _mono_value(expo, vars4) -> float:
    v = 1.0
    for e, x in zip(expo, vars4):
        if e:
            v *= x ** e
    return v


def h1_value(pert: Perturbation, y) -> float:
    """H1 at a state in y-ordering (q1,p1,q2,p2,q3,p3)."""
    q1, p1, q2, p2, q3, p3 = y
    vars4 = (p1, q1, p2, q2)
    total = 0.0
    for t in pert.terms:
        fid = FACTOR_NAMES.index(t.pendulum_factor)
        total += t.coefficient * _factor_value(fid, q3, p3) * _mono_value(t.oscillator_monomial, vars4)
    return total


def h1_gradient(pert: Perturbation, y) -> np.ndarray:
    """Gradient of H1 in y-ordering: (dq1, dp1, dq2, dp2, dq3, dp3)."""
    q1, p1, q2, p2, q3, p3 = y
    vars4 = (p1, q1, p2, q2)          # monomial slot order p1,q1,p2,q2
    slot_to_y = (1, 0, 3, 2)          # monomial slot -> y index
    g = np.zeros(6)
    for t in pert.terms:
        fid = FACTOR_NAMES.index(t.pendulum_factor)
        f, fq, fp, *_ = _factor_derivs(fid, q3, p3)
        m = _mono_value(t.oscillator_monomial, vars4)
        c = t.coefficient
        for slot in range(4):
            e = t.oscillator_monomial[slot]
            if e:
                dm = e * vars4[slot] ** (e - 1) * _mono_value(
                    tuple(0 if k == slot else t.oscillator_monomial[k] for k in range(4)), vars4)
                g[slot_to_y[slot]] += c * f * dm
        g[4] += c * fq * m
        g[5] += c * fp * m
    return g


# ---------------------------------------------------------------------------
# energy and vector field
# ---------------------------------------------------------------------------

def h00_cartesian(params: ModelParams, y4) -> float:
    q1, p1, q2, p2 = y4[:4]
    i1 = 0.5 * (p1 * p1 + q1 * q1)
    i2 = 0.5 * (p2 * p2 + q2 * q2)
    return params.a1 * i1 + params.a2 * i2 + 0.5 * params.b1 * i1 * i1 + 0.5 * params.b2 * i2 * i2


def h01(params: ModelParams, q3: float, p3: float) -> float:
    return 0.5 * p3 * p3 + params.lam ** 2 * (math.cos(q3) - 1.0)


def energy(params: ModelParams, pert: Perturbation, x: PhaseState) -> float:
    """Total energy H00 + H01 + eps*H1."""
    y = x.to_y()
    return energy_y(params, pert, y)


def energy_y(params: ModelParams, pert: Perturbation, y) -> float:
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite state")
    val = h00_cartesian(params, y) + h01(params, y[4], y[5])
    if params.eps != 0.0 and pert.terms:
        val += params.eps * h1_value(pert, y)
    return val


def vector_field_y(params: ModelParams, pert: Perturbation, y) -> np.ndarray:
    """Right-hand side of the Hamilton equations in y-ordering."""
    if not np.all(np.isfinite(y)):
        raise DomainError("non-finite state")
    q1, p1, q2, p2, q3, p3 = y
    a1, a2, b1, b2, lam, eps = params.a1, params.a2, params.b1, params.b2, params.lam, params.eps
    r1 = 0.5 * (p1 * p1 + q1 * q1)
    r2 = 0.5 * (p2 * p2 + q2 * q2)
    dy = np.array([
        a1 * p1 + b1 * p1 * r1,
        -a1 * q1 - b1 * q1 * r1,
        a2 * p2 + b2 * p2 * r2,
        -a2 * q2 - b2 * q2 * r2,
        p3,
        lam * lam * math.sin(q3),
    ])
    if eps != 0.0 and pert.terms:
        g = h1_gradient(pert, y)
        # dq_i += eps*dH1/dp_i ; dp_i -= eps*dH1/dq_i
        dy[0] += eps * g[1]
        dy[1] -= eps * g[0]
        dy[2] += eps * g[3]
        dy[3] -= eps * g[2]
        dy[4] += eps * g[5]
        dy[5] -= eps * g[4]
    return dy


def vector_field(params: ModelParams, pert: Perturbation, x: PhaseState) -> PhaseState:
    """Time derivative of a PhaseState (returned as a PhaseState of rates)."""
    return PhaseState.from_y(vector_field_y(params, pert, x.to_y()))


# ---------------------------------------------------------------------------
# action-angle coordinates
# ---------------------------------------------------------------------------

def to_action_angle(x4) -> ActionAngle:
    """Canonical map (p_i,q_i) -> (I_i, phi_i) with I=(q^2+p^2)/2, phi=atan2(p,q).

    Note the printed transform is orientation-reversed with respect to the
    flow: under the Hamilton equations this phi decreases at rate a_i+b_i*I_i.
    The dynamics modules use osc_angle/osc_embed, whose angle advances with
    the flow.  x4 is ordered (q1,p1,q2,p2).
    """
    q1, p1, q2, p2 = (float(v) for v in x4)
    i1 = 0.5 * (q1 * q1 + p1 * p1)
    i2 = 0.5 * (q2 * q2 + p2 * p2)
    deg1 = i1 == 0.0
    deg2 = i2 == 0.0
    phi1 = 0.0 if deg1 else math.atan2(p1, q1) % TWO_PI
    phi2 = 0.0 if deg2 else math.atan2(p2, q2) % TWO_PI
    return ActionAngle(i1, i2, phi1, phi2, deg1, deg2)


def from_action_angle(aa: ActionAngle) -> np.ndarray:
    """Inverse of to_action_angle; returns (q1,p1,q2,p2)."""
    if aa.I1 < 0 or aa.I2 < 0:
        raise DomainError("actions must be nonnegative")
    r1 = math.sqrt(2.0 * aa.I1)
    r2 = math.sqrt(2.0 * aa.I2)
    return np.array([
        r1 * math.cos(aa.phi1), r1 * math.sin(aa.phi1),
        r2 * math.cos(aa.phi2), r2 * math.sin(aa.phi2),
    ])


def osc_angle(q: float, p: float) -> float:
    """Oscillator angle oriented along the flow: advances at rate a+b*I."""
    return math.atan2(-p, q) % TWO_PI


def osc_embed(i: float, phi: float):
    """Inverse of osc_angle at action i: (q,p) = (sqrt(2i) cos phi, -sqrt(2i) sin phi)."""
    if i < 0:
        raise DomainError("action must be nonnegative")
    r = math.sqrt(2.0 * i)
    return r * math.cos(phi), -r * math.sin(phi)


# ---------------------------------------------------------------------------
# structural quantities in the actions
# ---------------------------------------------------------------------------

def h00_actions(params: ModelParams, i1: float, i2: float) -> float:
    """a1*I1 + a2*I2 + (b1/2)*I1^2 + (b2/2)*I2^2."""
    return params.a1 * i1 + params.a2 * i2 + 0.5 * params.b1 * i1 * i1 + 0.5 * params.b2 * i2 * i2


def omega1(params: ModelParams, i1: float) -> float:
    return params.a1 + params.b1 * i1


def omega2(params: ModelParams, i2: float) -> float:
    return params.a2 + params.b2 * i2


def d2_h00(params: ModelParams, y4) -> np.ndarray:
    """Hessian of H00 at (q1,p1,q2,p2); block-diagonal in the oscillator pairs."""
    q1, p1, q2, p2 = y4[:4]
    h = np.zeros((4, 4))

    def block(a, b, q, p):
        return np.array([
            [a + 0.5 * b * (3 * q * q + p * p), b * p * q],
            [b * p * q, a + 0.5 * b * (q * q + 3 * p * p)],
        ])

    h[:2, :2] = block(params.a1, params.b1, q1, p1)
    h[2:, 2:] = block(params.a2, params.b2, q2, p2)
    return h


def convexity_margin(params: ModelParams, sample_box: float = 3.0,
                     n_samples: int = 200, seed: int = 0) -> float:
    """Minimum eigenvalue of D^2 H00 over sampled points of [-box, box]^4.

    The quartic part of the Hessian is positive semidefinite, so the result
    is at least min(a1, a2); asserted to 1e-10.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-sample_box, sample_box, size=(n_samples, 4))
    pts[0] = 0.0  # always include the origin
    margin = math.inf
    for z in pts:
        w = np.linalg.eigvalsh(d2_h00(params, z))
        margin = min(margin, w[0])
    floor = min(params.a1, params.a2) - 1e-10
    if margin < floor:
        raise AssertionError(f"convexity margin {margin} below bound {floor}")
    return margin


def isoenergetic_determinant(params: ModelParams, i1: float, i2: float) -> float:
    """Bordered-Hessian determinant -b2*(a1+b1*I1)^2 - b1*(a2+b2*I2)^2 (< 0)."""
    if i1 < 0 or i2 < 0:
        raise DomainError("actions must be nonnegative")
    w1 = omega1(params, i1)
    w2 = omega2(params, i2)
    det = -params.b2 * w1 * w1 - params.b1 * w2 * w2
    if det >= 0.0:
        raise AssertionError("iso-energetic determinant not negative")
    return det


def critical_circle_action(params: ModelParams, c: float, which: int) -> float:
    """Action I* > 0 with a_i*I + (b_i/2)*I^2 = c for oscillator `which` in {1,2}."""
    if c <= 0:
        raise DomainError("c must be positive")
    if which == 1:
        a, b = params.a1, params.b1
    elif which == 2:
        a, b = params.a2, params.b2
    else:
        raise DomainError("which must be 1 or 2")
    return (-a + math.sqrt(a * a + 2.0 * b * c)) / b


def solve_i2(params: ModelParams, c: float, i1: float) -> float:
    """I2 >= 0 with h00_actions(I1, I2) = c; error if I1 exceeds the disk."""
    rem = c - (params.a1 * i1 + 0.5 * params.b1 * i1 * i1)
    if rem < -1e-15:
        raise DomainError("I1 outside the energy disk")
    rem = max(rem, 0.0)
    a, b = params.a2, params.b2
    return (-a + math.sqrt(a * a + 2.0 * b * rem)) / b


def unperturbed_flow(params: ModelParams, aa: ActionAngle, t: float) -> ActionAngle:
    """Exact inner flow: actions fixed, phi_i advanced by (a_i+b_i*I_i)*t mod 2*pi."""
    return ActionAngle(
        aa.I1, aa.I2,
        (aa.phi1 + omega1(params, aa.I1) * t) % TWO_PI,
        (aa.phi2 + omega2(params, aa.I2) * t) % TWO_PI,
        aa.degenerate1, aa.degenerate2,
    )


def pendulum_separatrix(lam: float, t: float, branch: int = +1):
    """Point (p3, q3) of the separatrix branch at time t.

    branch +1: q3(t) = 4*atan(e^{lam t}) rising 0 -> 2*pi, p3 = 2*lam*sech;
    branch -1 is the mirror image (-p3, -q3).
    """
    if lam <= 0:
        raise DomainError("lam must be positive")
    s = 1.0 if branch >= 0 else -1.0
    p3 = s * 2.0 * lam / math.cosh(lam * t)
    q3 = s * 4.0 * math.atan(math.exp(lam * t))
    return p3, q3
