"""Integrator checks: first integrals, separatrix oracle, events, Lyapunov rates."""

import math

import numpy as np
import pytest

from tsd import engine, model
from tsd.integrate import (
    Crossing,
    EventSpec,
    OrbitRecord,
    find_crossings,
    finite_time_lyapunov,
    integrate_orbit,
)
from tsd.model import DEFAULT_PARAMS, DomainError, ModelParams, Perturbation, PhaseState

ZERO = Perturbation.zero()


def lift_inner(params, i1, phi1, phi2, c=None, p3=0.0, q3=0.0):
    c = params.c if c is None else c
    i2 = model.solve_i2(params, c, i1)
    q1, p1 = model.osc_embed(i1, phi1)
    q2, p2 = model.osc_embed(i2, phi2)
    return PhaseState(p=(p1, p2, p3), q=(q1, q2, q3))


def test_tolerance_domain():
    x0 = lift_inner(DEFAULT_PARAMS, 0.05, 0.0, 0.0)
    with pytest.raises(DomainError):
        integrate_orbit(DEFAULT_PARAMS, ZERO, x0, 1.0, rtol=1e-2)
    with pytest.raises(DomainError):
        integrate_orbit(DEFAULT_PARAMS, ZERO, x0, 1.0, atol=1e-15)


def test_actions_conserved_long_run():
    x0 = lift_inner(DEFAULT_PARAMS, 0.06, 0.4, 2.1)
    rec = integrate_orbit(DEFAULT_PARAMS, ZERO, x0, 1000.0, 1e-12, 1e-12)
    ys = rec.ys
    i1 = 0.5 * (ys[:, 0] ** 2 + ys[:, 1] ** 2)
    i2 = 0.5 * (ys[:, 2] ** 2 + ys[:, 3] ** 2)
    assert np.max(np.abs(i1 - i1[0])) < 1e-10
    assert np.max(np.abs(i2 - i2[0])) < 1e-10


def test_energy_drift_budget():
    params = DEFAULT_PARAMS.with_eps(1e-2)
    x0 = lift_inner(params, 0.06, 0.4, 2.1, p3=0.05, q3=0.1)
    rec = integrate_orbit(params, model.TWO_HARMONIC_PERT, x0, 1000.0, 1e-12, 1e-12)
    assert rec.energy_drift <= 1e-10


def test_separatrix_oracle_with_time_shift():
    lam = 1.0
    params = ModelParams(1.6, 1.0, 0.8, 0.4, lam, 0.2)
    p3, q3 = model.pendulum_separatrix(lam, -5.0, +1)
    x0 = PhaseState(p=(0, 0, p3), q=(0, 0, q3))
    rec = integrate_orbit(params, ZERO, x0, 10.0, 1e-12, 1e-12)
    # fit the time shift from the apex crossing q3 = pi
    apex = find_crossings(rec, EventSpec(g=lambda s: s.q[2] - math.pi, direction=+1))
    assert len(apex) == 1
    shift = apex[0].t - 5.0
    sup = 0.0
    for t in np.linspace(0.0, 10.0, 201):
        ps, qs = model.pendulum_separatrix(lam, t - 5.0 - shift, +1)
        y = rec.traj.eval(t)
        sup = max(sup, abs(y[4] - qs), abs(y[5] - ps))
    assert sup < 1e-9


def test_time_reversal():
    x0 = lift_inner(DEFAULT_PARAMS, 0.05, 1.0, 2.0, p3=0.3, q3=2.5)
    rec = integrate_orbit(DEFAULT_PARAMS, ZERO, x0, 100.0, 1e-12, 1e-12)
    back = integrate_orbit(DEFAULT_PARAMS, ZERO, rec.states[-1], (100.0, 0.0), 1e-12, 1e-12)
    assert np.max(np.abs(back.ys[-1] - x0.to_y())) < 1e-9


def test_crossings_uniform_spacing():
    params = DEFAULT_PARAMS
    i1 = 0.05
    i2 = model.solve_i2(params, params.c, i1)
    w2 = model.omega2(params, i2)
    x0 = lift_inner(params, i1, 0.7, 0.0)
    rec = integrate_orbit(params, ZERO, x0, 12 * 2 * math.pi / w2, 1e-12, 1e-12)
    ev = EventSpec(g=lambda s: s.p[1], direction=-1)  # p2 falling, q2 > 0 side
    crossings = [c for c in find_crossings(rec, ev) if c.state.q[1] > 0]
    assert len(crossings) >= 10
    gaps = np.diff([c.t for c in crossings])
    assert np.allclose(gaps, 2 * math.pi / w2, atol=1e-8)
    for c in crossings:
        assert abs(c.state.p[1]) <= 1e-12


def test_constant_sign_event_empty():
    x0 = lift_inner(DEFAULT_PARAMS, 0.05, 0.7, 0.0)
    rec = integrate_orbit(DEFAULT_PARAMS, ZERO, x0, 20.0, 1e-10, 1e-10)
    assert find_crossings(rec, EventSpec(g=lambda s: s.q[0] ** 2 + 1.0)) == []


def test_crossing_time_stable_under_tolerance():
    params = DEFAULT_PARAMS
    x0 = lift_inner(params, 0.05, 0.7, 1.0)
    ev = EventSpec(g=lambda s: s.p[1], direction=-1)
    t_ref = None
    for rtol in (1e-12, 5e-13):
        rec = integrate_orbit(params, ZERO, x0, 10.0, rtol, 1e-13)
        cr = [c for c in find_crossings(rec, ev) if c.state.q[1] > 0]
        if t_ref is None:
            t_ref = cr[0].t
        else:
            assert abs(cr[0].t - t_ref) < 1e-8


def test_convergence_order():
    # endpoint error against the closed-form inner flow vs mean step size
    params = DEFAULT_PARAMS
    i1 = 0.05
    i2 = model.solve_i2(params, params.c, i1)
    x0 = lift_inner(params, i1, 0.7, 1.3)
    T = 50.0
    w1 = model.omega1(params, i1)
    w2 = model.omega2(params, i2)
    q1e, p1e = model.osc_embed(i1, (0.7 + w1 * T) % (2 * math.pi))
    q2e, p2e = model.osc_embed(i2, (1.3 + w2 * T) % (2 * math.pi))
    y_exact = np.array([q1e, p1e, q2e, p2e, 0, 0])
    hs, errs = [], []
    for tol in (1e-6, 1e-8, 1e-10, 1e-12):
        rec = integrate_orbit(params, ZERO, x0, T, tol, tol)
        err = np.max(np.abs(rec.ys[-1] - y_exact))
        h_mean = T / (len(rec.times) - 1)
        hs.append(h_mean)
        errs.append(max(err, 1e-16))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 7.0


def test_backend_agreement_with_scipy():
    # independent integrator oracle on a perturbed trajectory
    from scipy.integrate import solve_ivp
    params = DEFAULT_PARAMS.with_eps(1e-3)
    pert = model.TWO_HARMONIC_PERT

    def rhs(t, y):
        return model.vector_field_y(params, pert, y)

    x0 = lift_inner(params, 0.05, 0.7, 1.3, p3=0.2, q3=1.0)
    sol = solve_ivp(rhs, (0, 30.0), x0.to_y(), method="DOP853",
                    rtol=1e-12, atol=1e-12, dense_output=False)
    rec = integrate_orbit(params, pert, x0, 30.0, 1e-12, 1e-12)
    assert np.max(np.abs(sol.y[:, -1] - rec.ys[-1])) < 1e-9


def test_compiled_matches_python_backend():
    import tsd._engine_py as ep
    try:
        import tsd._core as cc
    except ImportError:
        pytest.skip("compiled core not built")
    params = DEFAULT_PARAMS.with_eps(1e-3)
    pert = model.TWO_HARMONIC_PERT
    x0 = lift_inner(params, 0.05, 0.7, 1.3, p3=0.2, q3=1.0)
    args = (params.packed(), *pert.packed(), x0.to_y(), 0.0, 20.0, 1e-12, 1e-12)
    st_p, ts_p, ys_p, fs_p, _ = ep.integrate_raw(0, *args)
    st_c, ts_c, ys_c, fs_c, _ = cc.integrate_raw(0, *args, np.inf, 10 ** 7, True)
    assert st_p == st_c == 0
    assert len(ts_p) == len(ts_c)
    assert np.max(np.abs(ys_p[-1] - ys_c[-1])) < 1e-10


def test_step_underflow_reports_partial():
    # an event function cannot cause underflow; force it with a tiny max_step
    x0 = lift_inner(DEFAULT_PARAMS, 0.05, 0.0, 0.0)
    with pytest.raises(engine.IntegrationError) as ei:
        integrate_orbit(DEFAULT_PARAMS, ZERO, x0, 1.0, 1e-12, 1e-12, max_step=1e-17)
    assert ei.value.trajectory is not None


def test_finite_time_lyapunov_rates():
    params = DEFAULT_PARAMS
    x0 = lift_inner(params, 0.05, 0.7, 1.3)
    alpha, beta = finite_time_lyapunov(params, ZERO, x0, 200.0)
    assert alpha == pytest.approx(params.lam, rel=0.01)
    assert beta <= 0.05
    assert beta < alpha


def test_lyapunov_preconditions():
    params = DEFAULT_PARAMS
    with pytest.raises(DomainError):
        finite_time_lyapunov(params, ZERO, lift_inner(params, 0.05, 0, 0), 10.0)
    with pytest.raises(DomainError):
        finite_time_lyapunov(params, ZERO,
                             lift_inner(params, 0.05, 0, 0, p3=0.5), 100.0)
