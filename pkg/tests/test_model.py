"""Model-layer checks: closed forms against independent oracles."""

import math

import numpy as np
import pytest

from tsd import model
from tsd.model import (
    DEFAULT_PARAMS,
    ActionAngle,
    DomainError,
    ModelParams,
    Perturbation,
    PhaseState,
    pert_from_spec,
)

ZERO = Perturbation.zero()


def fd_gradient(f, y, h=1e-6):
    """4th-order central differences of a scalar function of a vector."""
    y = np.asarray(y, dtype=float)
    g = np.zeros(len(y))
    for i in range(len(y)):
        e = np.zeros(len(y))
        e[i] = h
        g[i] = (-f(y + 2 * e) + 8 * f(y + e) - 8 * f(y - e) + f(y - 2 * e)) / (12 * h)
    return g


# ---------------------------------------------------------------------------
# construction guards
# ---------------------------------------------------------------------------

def test_params_validation():
    with pytest.raises(DomainError):
        ModelParams(1.0, 1.0, 0.4, 0.8, 1.0, 0.2)   # a1 == a2
    with pytest.raises(DomainError):
        ModelParams(1.0, 2.0, 0.4, 0.4, 1.0, 0.2)   # b1 == b2
    with pytest.raises(DomainError):
        ModelParams(-1.0, 2.0, 0.4, 0.8, 1.0, 0.2)
    with pytest.raises(DomainError):
        ModelParams(1.0, 2.0, 0.4, 0.8, 1.0, -0.1)
    with pytest.raises(DomainError):
        ModelParams(1.0, 2.0, 0.4, 0.8, 1.0, 0.2, eps=-1e-3)


def test_phase_state_guards():
    with pytest.raises(DomainError):
        PhaseState(p=(0.0, 0.0, math.nan), q=(0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

def test_energy_origin_is_zero():
    x = PhaseState(p=(0, 0, 0), q=(0, 0, 0))
    assert model.energy(DEFAULT_PARAMS, ZERO, x) == 0.0


def test_energy_inverted_pendulum():
    p = ModelParams(1.0, 2.0, 0.4, 0.8, 1.0, 0.2)
    x = PhaseState(p=(0, 0, 0), q=(0, 0, math.pi))
    assert model.energy(p, ZERO, x) == pytest.approx(-2.0, abs=1e-15)


def test_energy_oscillator_ring():
    # independent evaluation of the quartic polynomial: a*(r/2) + (b/2)*(r/2)^2
    p = ModelParams(1.0, 2.0, 1.0, 0.5, 1.0, 0.2)
    for ang in (0.0, 0.3, 2.0):
        x = PhaseState(p=(math.sin(ang), 0, 0), q=(math.cos(ang), 0, 0))
        r = 1.0
        expected = 1.0 * r / 2 + 0.5 * 1.0 * (r / 2) ** 2
        assert model.energy(p, ZERO, x) == pytest.approx(expected, abs=1e-14)
        assert expected == 0.625


def test_energy_rejects_nonfinite():
    with pytest.raises(DomainError):
        model.energy_y(DEFAULT_PARAMS, ZERO, np.array([0, 0, 0, 0, np.inf, 0.0]))


# ---------------------------------------------------------------------------
# vector field
# ---------------------------------------------------------------------------

def test_vector_field_equilibria():
    f0 = model.vector_field_y(DEFAULT_PARAMS, ZERO, np.zeros(6))
    assert np.all(f0 == 0.0)
    p = ModelParams(1.0, 2.0, 0.4, 0.8, 1.0, 0.2)
    f = model.vector_field_y(p, ZERO, np.array([0, 0, 0, 0, math.pi, 0.0]))
    assert abs(f[4]) == 0.0
    assert abs(f[5]) < 1e-15      # lam^2*sin(pi)


def test_vector_field_is_symplectic_gradient():
    rng = np.random.default_rng(7)
    pert = pert_from_spec([
        (0.8, "cos_m1", (0, 1, 0, 1)),
        (-0.6, "sin", (1, 0, 2, 0)),
        (0.3, "p3", (0, 2, 1, 0)),
        (0.5, "p3sq", (0, 0, 0, 1)),
    ])
    params = DEFAULT_PARAMS.with_eps(0.7)
    for _ in range(12):
        y = rng.uniform(-1.5, 1.5, 6)
        grad = fd_gradient(lambda z: model.energy_y(params, pert, z), y)
        f = model.vector_field_y(params, pert, y)
        # dq_i = dH/dp_i, dp_i = -dH/dq_i
        expect = np.array([grad[1], -grad[0], grad[3], -grad[2], grad[5], -grad[4]])
        assert np.allclose(f, expect, rtol=1e-7, atol=1e-9)


def test_energy_is_first_integral_pointwise():
    rng = np.random.default_rng(3)
    params = DEFAULT_PARAMS.with_eps(1e-2)
    pert = model.TWO_HARMONIC_PERT
    for _ in range(8):
        y = rng.uniform(-2, 2, 6)
        grad = fd_gradient(lambda z: model.energy_y(params, pert, z), y)
        f = model.vector_field_y(params, pert, y)
        bound = 1e-10 * (1 + np.linalg.norm(y) ** 4)
        assert abs(grad @ f) < max(bound, 1e-9)


# ---------------------------------------------------------------------------
# action-angle
# ---------------------------------------------------------------------------

def test_to_action_angle_examples():
    aa = model.to_action_angle([1.0, 0.0, 0.0, 0.0])   # (q1,p1)=(1,0)
    assert aa.I1 == pytest.approx(0.5) and aa.phi1 == 0.0
    aa = model.to_action_angle([0.0, 1.0, 0.0, 0.0])   # (p1,q1)=(1,0)
    assert aa.I1 == pytest.approx(0.5) and aa.phi1 == pytest.approx(math.pi / 2)


def test_action_angle_roundtrip():
    rng = np.random.default_rng(11)
    for _ in range(200):
        x = rng.uniform(-2, 2, 4)
        if 0.5 * (x[0] ** 2 + x[1] ** 2) < 1e-6 or 0.5 * (x[2] ** 2 + x[3] ** 2) < 1e-6:
            continue
        aa = model.to_action_angle(x)
        back = model.from_action_angle(aa)
        assert np.allclose(back, x, atol=1e-12)


def test_degenerate_angle_flag():
    aa = model.to_action_angle([0.0, 0.0, 1.0, 0.0])
    assert aa.degenerate1 and aa.phi1 == 0.0 and not aa.degenerate2


def test_osc_angle_orientation():
    # the flow-oriented angle advances at rate a+b*I under the Hamilton equations
    i, phi = 0.3, 1.1
    q, p = model.osc_embed(i, phi)
    assert model.osc_angle(q, p) == pytest.approx(phi)
    params = DEFAULT_PARAMS
    f = model.vector_field_y(params, ZERO, np.array([q, p, 1.0, 0.0, 0.0, 0.0]))
    # d/dt osc_angle = (q*(-dp) + p*dq)/(q^2+p^2)... check numerically
    h = 1e-7
    qn, pn = q + h * f[0], p + h * f[1]
    dphi = (model.osc_angle(qn, pn) - phi) / h
    assert dphi == pytest.approx(model.omega1(params, i), rel=1e-5)


# ---------------------------------------------------------------------------
# H00 in the actions, convexity, twist determinant
# ---------------------------------------------------------------------------

def test_h00_actions_examples():
    p = ModelParams(1.0, 2.0, 1.0, 0.5, 1.0, 0.2)
    assert model.h00_actions(p, 0.0, 0.0) == 0.0
    assert model.h00_actions(p, 1.0, 0.0) == pytest.approx(1.5)
    p2 = ModelParams(1.0, 2.0, 1.0, 1.0 + 1e-12, 1.0, 0.2)
    assert model.h00_actions(p2, 1.0, 1.0) == pytest.approx(4.0)


def test_h00_actions_matches_cartesian_lift():
    rng = np.random.default_rng(5)
    for _ in range(50):
        i1, i2 = rng.uniform(0, 3, 2)
        phi1, phi2 = rng.uniform(0, 2 * math.pi, 2)
        q1, p1 = model.osc_embed(i1, phi1)
        q2, p2 = model.osc_embed(i2, phi2)
        lift = model.h00_cartesian(DEFAULT_PARAMS, [q1, p1, q2, p2])
        assert lift == pytest.approx(model.h00_actions(DEFAULT_PARAMS, i1, i2), abs=1e-12)


def test_convexity_margin_bound_and_origin():
    m = model.convexity_margin(DEFAULT_PARAMS, sample_box=4.0, n_samples=300)
    assert m >= min(DEFAULT_PARAMS.a1, DEFAULT_PARAMS.a2) - 1e-10
    w = np.linalg.eigvalsh(model.d2_h00(DEFAULT_PARAMS, np.zeros(4)))
    expected = sorted([DEFAULT_PARAMS.a1, DEFAULT_PARAMS.a1,
                       DEFAULT_PARAMS.a2, DEFAULT_PARAMS.a2])
    assert np.allclose(sorted(w), expected, atol=1e-14)


def test_hessian_matches_finite_differences():
    rng = np.random.default_rng(17)
    z = rng.uniform(-2, 2, 4)
    h = 1e-4
    fd = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            ei = np.zeros(4); ei[i] = h
            ej = np.zeros(4); ej[j] = h
            fd[i, j] = (model.h00_cartesian(DEFAULT_PARAMS, z + ei + ej)
                        - model.h00_cartesian(DEFAULT_PARAMS, z + ei - ej)
                        - model.h00_cartesian(DEFAULT_PARAMS, z - ei + ej)
                        + model.h00_cartesian(DEFAULT_PARAMS, z - ei - ej)) / (4 * h * h)
    assert np.allclose(model.d2_h00(DEFAULT_PARAMS, z), fd, atol=1e-6)


def _bordered_det(params, i1, i2):
    h_ii = np.diag([params.b1, params.b2])
    w = np.array([model.omega1(params, i1), model.omega2(params, i2)])
    m = np.zeros((3, 3))
    m[:2, :2] = h_ii
    m[:2, 2] = w
    m[2, :2] = w
    return np.linalg.det(m)


def test_isoenergetic_determinant():
    p = ModelParams(1.0, 2.0, 1.0, 1.0 + 1e-12, 1.0, 0.2)
    assert model.isoenergetic_determinant(p, 1.0, 0.0) == pytest.approx(-8.0)
    p2 = DEFAULT_PARAMS
    assert model.isoenergetic_determinant(p2, 0.0, 0.0) == pytest.approx(
        -p2.b2 * p2.a1 ** 2 - p2.b1 * p2.a2 ** 2)
    rng = np.random.default_rng(23)
    for _ in range(20):
        i1, i2 = rng.uniform(0, 5, 2)
        det = model.isoenergetic_determinant(p2, i1, i2)
        assert det == pytest.approx(_bordered_det(p2, i1, i2), rel=1e-10)


def test_isoenergetic_negative_on_grid():
    for i1 in np.linspace(0, 5, 100):
        for i2 in np.linspace(0, 5, 100):
            assert model.isoenergetic_determinant(DEFAULT_PARAMS, i1, i2) < 0


# ---------------------------------------------------------------------------
# critical circles
# ---------------------------------------------------------------------------

def test_critical_circle_action():
    p = ModelParams(1.0, 2.0, 2.0, 0.8, 1.0, 1.5)
    istar = model.critical_circle_action(p, 1.5, 1)
    assert istar == pytest.approx((-1 + math.sqrt(7)) / 2, abs=1e-12)
    assert model.h00_actions(p, istar, 0.0) == pytest.approx(1.5, abs=1e-12)
    # c -> 0+ limit
    assert model.critical_circle_action(p, 1e-12, 1) < 2e-12
    # harmonic limit b -> 0 with a=1, c=1
    p3 = ModelParams(1.0, 2.0, 1e-8, 0.8, 1.0, 1.0)
    assert model.critical_circle_action(p3, 1.0, 1) == pytest.approx(1.0, rel=1e-6)


def test_solve_i2_consistency():
    p = DEFAULT_PARAMS
    jmax = model.critical_circle_action(p, p.c, 1)
    for frac in (0.1, 0.5, 0.9):
        i1 = frac * jmax
        i2 = model.solve_i2(p, p.c, i1)
        assert model.h00_actions(p, i1, i2) == pytest.approx(p.c, abs=1e-12)
    assert model.solve_i2(p, p.c, jmax) == pytest.approx(0.0, abs=1e-7)


# ---------------------------------------------------------------------------
# unperturbed flow and separatrix
# ---------------------------------------------------------------------------

def test_unperturbed_flow_basic():
    aa = ActionAngle(1.0, 0.5, 0.3, 5.9)
    assert model.unperturbed_flow(DEFAULT_PARAMS, aa, 0.0) == aa
    p = ModelParams(1.0, 2.0, 1.0, 0.8, 1.0, 0.2)
    out = model.unperturbed_flow(p, ActionAngle(1.0, 0.0, 0.0, 0.0), 1.0)
    assert out.phi1 == pytest.approx(2.0)   # omega1 = a1 + b1*I1 = 2


def test_separatrix_closed_form():
    lam = 1.0
    p3, q3 = model.pendulum_separatrix(lam, 0.0, +1)
    assert p3 == pytest.approx(2.0, abs=1e-14)
    assert q3 == pytest.approx(math.pi, abs=1e-14)
    # asymptotics
    p3, q3 = model.pendulum_separatrix(lam, 10.0 / lam, +1)
    assert abs(p3) < 1e-4 * 2 * lam
    assert q3 == pytest.approx(2 * math.pi, abs=1e-3)
    p3, q3 = model.pendulum_separatrix(lam, -10.0 / lam, +1)
    assert abs(p3) < 1e-4 * 2 * lam and abs(q3) < 1e-3
    # zero pendulum energy along the curve
    par = ModelParams(1.0, 2.0, 0.4, 0.8, lam, 0.2)
    for t in (-3.0, -1.0, 0.0, 1.0, 3.0):
        for br in (+1, -1):
            p3, q3 = model.pendulum_separatrix(lam, t, br)
            assert abs(model.h01(par, q3, p3)) < 1e-13


def test_separatrix_satisfies_ode():
    # residual of (dq3/dt - p3, dp3/dt - lam^2 sin q3) with analytic derivatives
    lam = 1.7
    for t in np.linspace(-3, 3, 25):
        p3, q3 = model.pendulum_separatrix(lam, t, +1)
        sech = 1.0 / math.cosh(lam * t)
        tanh = math.tanh(lam * t)
        dq3 = 4 * lam * math.exp(lam * t) / (1 + math.exp(2 * lam * t))  # = 2 lam sech
        dp3 = -2 * lam * lam * sech * tanh
        assert abs(dq3 - p3) < 1e-12
        assert abs(dp3 - lam * lam * math.sin(q3)) < 1e-12


# ---------------------------------------------------------------------------
# perturbation structure
# ---------------------------------------------------------------------------

def test_perturbation_gradient_exactness():
    rng = np.random.default_rng(29)
    pert = pert_from_spec([
        (1.3, "cos_m1", (2, 1, 0, 0)),
        (-0.4, "sin", (0, 0, 1, 3)),
        (0.9, "p3", (1, 1, 1, 1)),
        (-2.2, "p3sq", (0, 2, 0, 0)),
    ])
    for _ in range(20):
        y = rng.uniform(-1.5, 1.5, 6)
        g = model.h1_gradient(pert, y)
        fd = fd_gradient(lambda z: model.h1_value(pert, z), y)
        assert np.allclose(g, fd, rtol=1e-7, atol=1e-9)


def test_perturbation_vanishes_at_pendulum_origin():
    pert = model.TWO_HARMONIC_PERT
    rng = np.random.default_rng(31)
    for _ in range(10):
        y = np.concatenate([rng.uniform(-2, 2, 4), [0.0, 0.0]])
        assert model.h1_value(pert, y) == 0.0


def test_perturbation_term_validation():
    with pytest.raises(DomainError):
        pert_from_spec([(1.0, "cos", (0, 0, 0, 0))])
    with pytest.raises(DomainError):
        pert_from_spec([(1.0, "sin", (0, -1, 0, 0))])
