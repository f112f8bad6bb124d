"""Manifold checks: graph solve and scaling, fibers, shooting, direct
scattering map against the splitting prediction."""

import math

import numpy as np
import pytest

from tsd import manifold, melnikov, model
from tsd.manifold import BasePoint, FiberError, nhim_build
from tsd.model import (
    DEFAULT_PARAMS,
    Perturbation,
    PhaseState,
    TWO_HARMONIC_PERT,
    pert_from_spec,
)

P = DEFAULT_PARAMS
JM = model.critical_circle_action(P, P.c, 1)
ZERO = Perturbation.zero()
SIN_PERT = pert_from_spec([(1.0, "sin", (0, 1, 0, 0))])


def base_err(a, b):
    return max(abs(a.i1 - b.i1),
               abs((a.phi1 - b.phi1 + math.pi) % (2 * math.pi) - math.pi),
               abs((a.phi2 - b.phi2 + math.pi) % (2 * math.pi) - math.pi))


def test_nhim_zero_cases():
    nh = nhim_build(P.with_eps(0.0) if P.eps else P, ZERO)
    assert nh.is_zero() and nh.invariance_residual == 0.0
    # plane-invariant coupling: the zero graph is exactly invariant
    nh2 = nhim_build(P.with_eps(1e-3), TWO_HARMONIC_PERT)
    assert nh2.is_zero()
    assert nh2.invariance_residual == 0.0


def test_nhim_graph_scaling():
    sups = []
    residuals = []
    eps_list = (1e-4, 3e-4, 1e-3, 3e-3)
    for eps in eps_list:
        nh = nhim_build(P.with_eps(eps), SIN_PERT, n_i1=8, n_phi=16, refine=False)
        assert not nh.is_zero()
        sups.append(float(np.max(np.abs(nh.q_coeff))))
        residuals.append(nh.invariance_residual)
    # graph sup-norm is O(eps), <= 10 eps
    for eps, s in zip(eps_list, sups):
        assert s <= 10 * eps
    slope = np.polyfit(np.log(eps_list), np.log(sups), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.05)
    # invariance residual / eps^2 stays bounded
    ratios = [r / e ** 2 for r, e in zip(residuals, eps_list)]
    assert max(ratios) < 10.0


def test_nhim_residual_small_after_build():
    nh = nhim_build(P.with_eps(1e-3), SIN_PERT, n_i1=8, n_phi=16)
    assert nh.invariance_residual <= 1e-5
    assert not nh.residual_flagged


def test_nhim_energy_consistency():
    params = P.with_eps(1e-3)
    nh = nhim_build(params, SIN_PERT, n_i1=8, n_phi=16, refine=False)
    b = BasePoint(0.5 * JM, 1.2, 2.3)
    y = manifold.base_lift(params, SIN_PERT, nh, b)
    assert model.energy_y(params, SIN_PERT, y) == pytest.approx(params.c, abs=1e-10)


def test_nhim_rejects_large_eps():
    with pytest.raises(model.DomainError):
        nhim_build(P.with_eps(2e-2), SIN_PERT)


def test_fiber_footpoint_on_manifold():
    b = BasePoint(0.5 * JM, 1.0, 2.0)
    y = manifold.base_lift(P, ZERO, None, b)
    foot, err, _ = manifold.fiber_footpoint(P, ZERO, None, PhaseState.from_y(y), "stable")
    assert base_err(foot, b) < 1e-9


def test_fiber_footpoint_separatrix_product():
    # eps = 0: both footpoints of a separatrix lift equal the base orbit
    b = BasePoint(0.5 * JM, 1.0, 2.0)
    y = manifold.base_lift(P, ZERO, None, b)
    p3, q3 = model.pendulum_separatrix(P.lam, -3.0, +1)
    y[4], y[5] = q3, p3
    for direction in ("stable", "unstable"):
        foot, err, _ = manifold.fiber_footpoint(P, ZERO, None,
                                                PhaseState.from_y(y), direction)
        assert base_err(foot, b) < 1e-5
        assert base_err(foot, b) <= max(err, 1e-10)


def test_fiber_threshold_scaling():
    # seeded point: footpoint error shrinks with the convergence threshold
    params = P.with_eps(1e-3)
    nh = nhim_build(params, TWO_HARMONIC_PERT)
    b = BasePoint(0.5 * JM, 1.0, 2.0)
    eq, ep = manifold.pendulum_eigvec(params.lam, "stable")
    y = manifold.base_lift(params, TWO_HARMONIC_PERT, nh, b)
    y[4] += 1e-4 * eq
    y[5] += 1e-4 * ep
    errs = []
    for tol in (1e-6, 1e-7):
        foot, _, _ = manifold.fiber_footpoint(params, TWO_HARMONIC_PERT, nh,
                                              PhaseState.from_y(y), "stable",
                                              close_tol=tol)
        errs.append(base_err(foot, b))
    assert errs[1] <= 0.2 * errs[0] + 1e-11


def test_fiber_wave_map_consistency():
    params = P.with_eps(1e-3)
    nh = nhim_build(params, TWO_HARMONIC_PERT)
    b = BasePoint(0.4 * JM, 2.2, 0.7)
    eq, ep = manifold.pendulum_eigvec(params.lam, "unstable")
    y = manifold.base_lift(params, TWO_HARMONIC_PERT, nh, b)
    y[4] += 1e-6 * eq
    y[5] += 1e-6 * ep
    foot, err, _ = manifold.fiber_footpoint(params, TWO_HARMONIC_PERT, nh,
                                            PhaseState.from_y(y), "unstable")
    assert base_err(foot, b) < 1e-7


def test_fiber_rejects_far_points():
    y = manifold.base_lift(P, ZERO, None, BasePoint(0.5 * JM, 0, 0))
    y[4] = 2.0
    with pytest.raises(FiberError):
        manifold.fiber_footpoint(P, ZERO, None, PhaseState.from_y(y), "stable")


@pytest.fixture(scope="module")
def shoot_setup():
    params = P.with_eps(1e-3)
    nh = nhim_build(params, TWO_HARMONIC_PERT)
    b = BasePoint(0.5 * JM, 1.0, 2.0)
    roots = melnikov.critical_tau_all(params, TWO_HARMONIC_PERT, b.i1, b.phi1,
                                      b.phi2, +1)
    orbit = manifold.homoclinic_shoot(params, TWO_HARMONIC_PERT, nh, b,
                                      roots[0][0], +1)
    return params, nh, b, roots, orbit


def test_shoot_converges(shoot_setup):
    _, _, _, _, orbit = shoot_setup
    assert orbit.match_residual <= 1e-9


def test_shoot_matches_prediction(shoot_setup):
    params, nh, b, roots, orbit = shoot_setup
    red, _, _ = melnikov.scattering_shift(params, TWO_HARMONIC_PERT, b.i1,
                                          b.phi1, b.phi2, +1, params.eps,
                                          tau_star=roots[0][0])
    direct = orbit.foot_down.i1 - orbit.foot_up.i1
    assert abs(direct - red) <= 5 * params.eps ** 1.5


def test_shoot_distinct_families(shoot_setup):
    params, nh, b, roots, orbit = shoot_setup
    assert len(roots) >= 2
    orbit2 = manifold.homoclinic_shoot(params, TWO_HARMONIC_PERT, nh, b,
                                       roots[1][0], +1)
    d1 = orbit.foot_down.i1 - orbit.foot_up.i1
    d2 = orbit2.foot_down.i1 - orbit2.foot_up.i1
    assert abs(d1 - d2) > 1e-6


def test_disagreement_slope(shoot_setup):
    _, _, b, _, _ = shoot_setup
    eps_list = (1e-4, 3e-4, 1e-3, 3e-3)
    diffs = []
    for eps in eps_list:
        pe = P.with_eps(eps)
        nhe = nhim_build(pe, TWO_HARMONIC_PERT)
        rts = melnikov.critical_tau_all(pe, TWO_HARMONIC_PERT, b.i1, b.phi1,
                                        b.phi2, +1)
        o = manifold.homoclinic_shoot(pe, TWO_HARMONIC_PERT, nhe, b, rts[0][0], +1)
        red, _, _ = melnikov.scattering_shift(pe, TWO_HARMONIC_PERT, b.i1,
                                              b.phi1, b.phi2, +1, eps,
                                              tau_star=rts[0][0])
        d = o.foot_down.i1 - o.foot_up.i1
        assert abs(d - red) <= 5 * eps ** 1.5
        diffs.append(abs(d - red))
    slope = np.polyfit(np.log(eps_list), np.log(diffs), 1)[0]
    assert slope >= 1.3


def test_transversality_angle_scaling(shoot_setup):
    params, nh, b, roots, orbit = shoot_setup
    ang_1em3 = manifold.transversality_angle(params, TWO_HARMONIC_PERT, nh, orbit)
    assert ang_1em3 > 1e-4
    pe = P.with_eps(1e-4)
    nhe = nhim_build(pe, TWO_HARMONIC_PERT)
    rts = melnikov.critical_tau_all(pe, TWO_HARMONIC_PERT, b.i1, b.phi1, b.phi2, +1)
    o = manifold.homoclinic_shoot(pe, TWO_HARMONIC_PERT, nhe, b, rts[0][0], +1)
    ang_1em4 = manifold.transversality_angle(pe, TWO_HARMONIC_PERT, nhe, o)
    ratio = (ang_1em3 / 1e-3) / (ang_1em4 / 1e-4)
    assert abs(ratio - 1.0) < 0.3


def test_scattering_map_direct_semantics(shoot_setup):
    params, nh, b, roots, orbit = shoot_setup
    image, orb = manifold.scattering_map_direct(params, TWO_HARMONIC_PERT, nh,
                                                b, roots[0][0], +1)
    assert image.i1 - b.i1 == pytest.approx(orb.foot_down.i1 - orb.foot_up.i1,
                                            abs=1e-14)
    # angle displacement of the synchronized image is O(eps * scale)
    assert abs((image.phi1 - b.phi1 + math.pi) % (2 * math.pi) - math.pi) < 0.1
    assert abs((image.phi2 - b.phi2 + math.pi) % (2 * math.pi) - math.pi) < 0.1


def test_branch_symmetry_of_shoot(shoot_setup):
    # an even coupling is equivariant under the pendulum flip: the branch -1
    # shoot from the same base converges with the mirrored excursion
    params, nh, b, roots, _ = shoot_setup
    rts_m = melnikov.critical_tau_all(params, TWO_HARMONIC_PERT, b.i1, b.phi1,
                                      b.phi2, -1)
    o_m = manifold.homoclinic_shoot(params, TWO_HARMONIC_PERT, nh, b,
                                    rts_m[0][0], -1)
    assert o_m.match_residual <= 1e-9
    assert o_m.state_match[4] == pytest.approx(-math.pi, abs=1e-9)
    # even factor: the splitting data on both branches coincide, so the
    # predicted and realized shifts agree across branches to O(eps^2)
    o_p = manifold.homoclinic_shoot(params, TWO_HARMONIC_PERT, nh, b,
                                    roots[0][0], +1)
    d_p = o_p.foot_down.i1 - o_p.foot_up.i1
    d_m = o_m.foot_down.i1 - o_m.foot_up.i1
    assert d_p == pytest.approx(d_m, abs=5 * params.eps ** 1.5)
