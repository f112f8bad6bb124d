"""Splitting-potential checks: closed form, derivative consistency, critical
points, shifts and coverage."""

import math

import numpy as np
import pytest

from tsd import melnikov, model
from tsd.melnikov import (
    NoCriticalPointError,
    critical_tau,
    critical_tau_all,
    coverage_report,
    harmonic_expansion,
    melnikov_potential,
    scattering_shift,
    sech2_q1_closed_form,
    sech_cos_integral,
    splitting_distance,
)
from tsd.model import DEFAULT_PARAMS, SECH2_PERT, TWO_HARMONIC_PERT, pert_from_spec

P = DEFAULT_PARAMS
JM = model.critical_circle_action(P, P.c, 1)


def test_sech_cos_constant():
    # (pi*w/lam^2)/sinh(pi*w/(2 lam)) at w = lam = 1
    assert sech_cos_integral(1.0, 1.0) == pytest.approx(math.pi / math.sinh(math.pi / 2))
    assert sech_cos_integral(1.0, 1.0) == pytest.approx(1.3651389, abs=1e-6)
    # quadrature cross-check of the identity
    from scipy.integrate import quad
    for w, lam in [(0.7, 1.0), (1.9, 1.3)]:
        val, _ = quad(lambda s: math.cos(w * s) / math.cosh(lam * s) ** 2, -60, 60,
                      limit=400)
        assert val == pytest.approx(sech_cos_integral(w, lam), rel=1e-10)


def test_quadrature_matches_closed_form():
    rng = np.random.default_rng(2)
    for _ in range(12):
        i1 = rng.uniform(0.1 * JM, 0.9 * JM)
        phi1, phi2, tau = rng.uniform(0, 2 * math.pi, 3)
        s = melnikov_potential(P, SECH2_PERT, i1, phi1, phi2, tau, +1, 1e-11)
        val, d_tau, d2_tau, d_phi1 = sech2_q1_closed_form(P, i1, phi1, tau)
        assert s.value == pytest.approx(val, rel=1e-8, abs=1e-12)
        assert s.d_tau == pytest.approx(d_tau, rel=1e-8, abs=1e-10)
        assert s.d2_tau == pytest.approx(d2_tau, rel=1e-8, abs=1e-10)
        assert s.d_phi1 == pytest.approx(d_phi1, rel=1e-8, abs=1e-10)
        assert s.quad_error <= 1e-9


def test_pendulum_only_term_is_constant_in_tau():
    pert = pert_from_spec([(1.0, "cos_m1", (0, 0, 0, 0))])
    for tau in (0.0, 0.7, 2.0):
        s = melnikov_potential(P, pert, 0.5 * JM, 0.3, 1.0, tau, +1, 1e-11)
        assert abs(s.d_tau) <= 1e-9
        # value equals the full sech^2 integral, -2 * 2/lam
        assert s.value == pytest.approx(-4.0 / P.lam, rel=1e-9)
    with pytest.raises(NoCriticalPointError):
        critical_tau(P, pert, 0.5 * JM, 0.3, 1.0, +1)


def test_branch_symmetry_odd_factor():
    pert = pert_from_spec([(1.0, "p3", (0, 1, 0, 0))])
    sp = melnikov_potential(P, pert, 0.4 * JM, 0.9, 0.2, 0.3, +1, 1e-11)
    sm = melnikov_potential(P, pert, 0.4 * JM, 0.9, 0.2, 0.3, -1, 1e-11)
    assert sp.value == pytest.approx(-sm.value, rel=1e-9, abs=1e-12)


def test_even_factor_branch_invariance():
    sp = melnikov_potential(P, TWO_HARMONIC_PERT, 0.4 * JM, 0.9, 0.2, 0.3, +1, 1e-11)
    sm = melnikov_potential(P, TWO_HARMONIC_PERT, 0.4 * JM, 0.9, 0.2, 0.3, -1, 1e-11)
    assert sp.value == pytest.approx(sm.value, rel=1e-10)


def test_derivatives_match_finite_differences():
    i1 = 0.45 * JM
    phi1, phi2, tau = 0.7, 2.1, 0.9
    h = 1e-5
    s = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1, phi2, tau, +1, 1e-11)
    vp = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1, phi2, tau + h, +1, 1e-11).value
    vm = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1, phi2, tau - h, +1, 1e-11).value
    assert s.d_tau == pytest.approx((vp - vm) / (2 * h), rel=1e-5)
    assert s.d2_tau == pytest.approx(
        (vp - 2 * s.value + vm) / h ** 2, rel=1e-4)
    wp = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1 + h, phi2, tau, +1, 1e-11).value
    wm = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1 - h, phi2, tau, +1, 1e-11).value
    assert s.d_phi1 == pytest.approx((wp - wm) / (2 * h), rel=1e-5)


def test_shift_covariance():
    # M(I, phi + w s, tau + s) = M(I, phi, tau)
    rng = np.random.default_rng(9)
    i1 = 0.5 * JM
    i2, w1, w2 = melnikov._inner_frequencies(P, i1)
    for _ in range(5):
        phi1, phi2, tau = rng.uniform(0, 2 * math.pi, 3)
        s = rng.uniform(0, 5)
        a = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1, phi2, tau, +1, 1e-11)
        b = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1 + w1 * s,
                               phi2 + w2 * s, tau + s, +1, 1e-11)
        assert b.value == pytest.approx(a.value, abs=1e-9)


def test_tail_robustness():
    # raising the cutoff changes the value by less than the reported error
    rng = np.random.default_rng(4)
    for _ in range(10):
        i1 = rng.uniform(0.2 * JM, 0.8 * JM)
        phi1, phi2, tau = rng.uniform(0, 2 * math.pi, 3)
        s1 = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1, phi2, tau, +1, 1e-9)
        s2 = melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1, phi2, tau, +1, 1e-12)
        assert abs(s1.value - s2.value) <= s1.quad_error + s2.quad_error


def test_expansion_agrees_with_quadrature():
    rng = np.random.default_rng(6)
    perts = [SECH2_PERT, TWO_HARMONIC_PERT,
             pert_from_spec([(0.7, "sin", (1, 0, 0, 1)), (0.4, "p3", (0, 2, 0, 0)),
                             (-1.1, "p3sq", (0, 0, 1, 0))])]
    for pert in perts:
        for branch in (+1, -1):
            i1 = rng.uniform(0.2 * JM, 0.8 * JM)
            exp = harmonic_expansion(P, pert, i1, branch)
            phi1, phi2, tau = rng.uniform(0, 2 * math.pi, 3)
            s = melnikov_potential(P, pert, i1, phi1, phi2, tau, branch, 1e-11)
            assert exp.value(phi1, phi2, tau) == pytest.approx(s.value, abs=1e-10)
            assert exp.d_tau(phi1, phi2, tau) == pytest.approx(s.d_tau, abs=1e-10)
            assert exp.d_phi1(phi1, phi2, tau) == pytest.approx(s.d_phi1, abs=1e-10)


def test_critical_tau_sech2():
    # phi1 - w1 tau = k pi; for phi1 = 0.3 and the matching parameters the
    # first root sits at 0.3/w1
    i1 = 0.5 * JM
    w1 = model.omega1(P, i1)
    roots = critical_tau_all(P, SECH2_PERT, i1, 0.3, 0.0, +1)
    predicted = sorted(((0.3 - k * math.pi) / w1) % (2 * math.pi / w1) for k in range(2))
    got = sorted(r[0] for r in roots)
    assert len(got) == 2
    assert got == pytest.approx(predicted, abs=1e-8)
    # spec instance: phi1 = 0.3, omega1 = 1.5 -> tau* = 0.2
    p_custom = model.ModelParams(1.0, 2.0, 1.0, 0.8, 1.0, 1.235, 0.0)
    i1c = 0.5   # omega1 = 1 + 1*0.5 = 1.5
    rootsc = critical_tau_all(p_custom, SECH2_PERT, i1c, 0.3, 0.0, +1)
    assert min(r[0] for r in rootsc) == pytest.approx(0.2, abs=1e-8)
    tau0, d2 = critical_tau(p_custom, SECH2_PERT, i1c, 0.3, 0.0, +1)
    s = melnikov_potential(p_custom, SECH2_PERT, i1c, 0.3, 0.0, tau0, +1, 1e-11)
    h = 1e-5
    dp = melnikov_potential(p_custom, SECH2_PERT, i1c, 0.3, 0.0, tau0 + h, +1, 1e-11).d_tau
    dm = melnikov_potential(p_custom, SECH2_PERT, i1c, 0.3, 0.0, tau0 - h, +1, 1e-11).d_tau
    assert d2 == pytest.approx((dp - dm) / (2 * h), rel=1e-5)


def test_splitting_distance():
    i1 = 0.5 * JM
    tau_star, _ = critical_tau(P, SECH2_PERT, i1, 0.3, 0.0, +1)
    assert splitting_distance(P, SECH2_PERT, i1, 0.3, 0.0, tau_star, 1e-3) == \
        pytest.approx(0.0, abs=1e-12)
    # at the quarter phase the splitting attains +-eps * amplitude * w1
    w1 = model.omega1(P, i1)
    tau_quarter = tau_star + 0.5 * math.pi / w1
    C = sech_cos_integral(w1, P.lam)
    expected = 2.0 * math.sqrt(2 * i1) * w1 * C * 1e-3
    got = splitting_distance(P, SECH2_PERT, i1, 0.3, 0.0, tau_quarter, 1e-3)
    assert abs(got) == pytest.approx(expected, rel=1e-6)
    # linearity in eps
    half = splitting_distance(P, SECH2_PERT, i1, 0.3, 0.0, tau_quarter, 5e-4)
    assert got == pytest.approx(2 * half, rel=1e-12)


def test_envelope_property():
    # d/dphi1 of M(phi1, tau*(phi1)) equals dM/dphi1 at tau*
    i1 = 0.5 * JM
    h = 1e-5

    def reduced(phi1):
        ts, _ = critical_tau(P, TWO_HARMONIC_PERT, i1, phi1, 1.0, +1)
        return melnikov_potential(P, TWO_HARMONIC_PERT, i1, phi1, 1.0, ts, +1, 1e-11).value, ts

    v0, ts0 = reduced(0.8)
    vp, _ = reduced(0.8 + h)
    vm, _ = reduced(0.8 - h)
    s = melnikov_potential(P, TWO_HARMONIC_PERT, i1, 0.8, 1.0, ts0, +1, 1e-11)
    assert (vp - vm) / (2 * h) == pytest.approx(s.d_phi1, rel=1e-4)


def test_scattering_shift_structure():
    i1 = 0.5 * JM
    # single harmonic: reduced shift vanishes at every critical point
    red, lit, ts = scattering_shift(P, SECH2_PERT, i1, 0.3, 0.0, +1, 1e-3)
    assert abs(red) < 1e-12
    assert abs(lit) > 1e-6      # the printed bracket form does not vanish
    # eps = 0
    assert scattering_shift(P, SECH2_PERT, i1, 0.3, 0.0, +1, 0.0)[:2] == (0.0, 0.0)
    # two harmonics: nonzero on an open phase set
    vals = []
    for phi1 in np.linspace(0, 2 * math.pi, 6, endpoint=False):
        red, _, _ = scattering_shift(P, TWO_HARMONIC_PERT, i1, phi1, 1.0, +1, 1e-3)
        vals.append(red)
    assert max(abs(v) for v in vals) > 1e-5


def test_coverage_two_harmonic_full_both_signs():
    grid = np.linspace(0.25 * JM, 0.75 * JM, 3)
    rows = coverage_report(P, TWO_HARMONIC_PERT, 1e-3, grid, n_phi=6)
    for r in rows:
        assert r.has_positive and r.has_negative
        assert r.n_families >= 1


def test_coverage_empty_for_pendulum_only():
    pert = pert_from_spec([(1.0, "cos_m1", (0, 0, 0, 0))])
    rows = coverage_report(P, pert, 1e-3, [0.5 * JM], n_phi=4)
    assert not rows[0].has_positive and not rows[0].has_negative
    assert rows[0].n_families == 0


def test_coverage_single_harmonic_zero_shift():
    rows = coverage_report(P, SECH2_PERT, 1e-3, [0.5 * JM], n_phi=4)
    assert rows[0].n_families >= 1
    assert not rows[0].has_positive and not rows[0].has_negative
