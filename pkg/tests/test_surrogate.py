import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltvar import serialize
from voltvar.errors import DomainError, NonsmoothPointError
from voltvar.gridmodel import build_sensitivity, feeder_from_parents, GENERATOR, single_line_feeder
from voltvar.surrogate import (CVPSC, FREE, NONINCREASING, RPSC, ScalarShapeFunction, SurrogateSet, certify,
                               closed_loop_jacobian, evaluate, evaluate_h, jacobian_spectral_radius,
                               lipschitz_bound, project, rpsc_eps_bound, sampled_slope)


def linear_set(psi_slope=0.3, phi_slope=-0.5, regime=RPSC, box=0.4):
    psi = ScalarShapeFunction.near_linear(psi_slope, width=1e-6)
    phi = ScalarShapeFunction.near_linear(phi_slope, center=1.0, width=1e-6,
                                          sign_mode=NONINCREASING if phi_slope <= 0 else FREE)
    return SurrogateSet((1,), [psi], [phi], regime, [-box], [box])


def test_single_unit_value():
    f = ScalarShapeFunction([1.0], [-0.5], [0.0])
    assert evaluate(f, 0.0) == 0.0
    assert evaluate(f, 1.0) == pytest.approx(-0.5 * math.tanh(1.0), abs=1e-15)
    assert evaluate(f, 1.0) == pytest.approx(-0.3808, abs=1e-4)


def test_linear_stand_ins():
    s = linear_set()
    assert evaluate_h(s, 0, 0.1, 0.99) == pytest.approx(0.035, abs=1e-12)
    assert evaluate_h(s, 0, 0.1, 0.99) == pytest.approx(0.03 + 0.005, abs=1e-12)


def test_clamp_and_domain():
    s = linear_set(psi_slope=0.9, box=0.1)
    assert evaluate_h(s, 0, 0.1, 0.9) == pytest.approx(0.1)
    with pytest.raises(DomainError):
        evaluate_h(s, 0, 0.2, 1.0)


def test_lipschitz_examples():
    f = ScalarShapeFunction([2.0], [0.3], [0.0])
    assert lipschitz_bound(f) == pytest.approx(0.6)
    assert sampled_slope(f, -1, 1) == pytest.approx(0.6, abs=1e-12)
    g = ScalarShapeFunction([1.0, 3.0], [0.2, -0.1], [0.0, 0.0])
    assert lipschitz_bound(g) == pytest.approx(0.5)


weights = st.lists(st.floats(-5, 5), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(weights, weights, st.floats(0, 3), st.sampled_from([FREE, NONINCREASING]), st.floats(0.1, 30))
def test_projection_is_feasible_and_idempotent(w_in, w_out, cap, mode, scale):
    k = min(len(w_in), len(w_out))
    f = ScalarShapeFunction(w_in[:k], w_out[:k], np.linspace(-1, 1, k), 0.0, mode, cap, 0.0, scale)
    g = project(f)
    assert g.is_valid()
    assert project(g) is g
    assert sampled_slope(g, -2, 2, n=401) <= lipschitz_bound(g) + 1e-12
    if mode == NONINCREASING:
        xs = np.linspace(-3, 3, 301)
        assert np.all(np.diff(g(xs)) <= 1e-12)


def test_certificate_arithmetic():
    psi = ScalarShapeFunction.near_linear(0.3)
    phi = ScalarShapeFunction.near_linear(-0.5, sign_mode=NONINCREASING)
    s = SurrogateSet((1,), [psi], [phi], CVPSC, [-1], [1])
    cert = certify(s, X_norm=0.2)
    assert cert.c1_value == pytest.approx(0.4)
    assert cert.c1_satisfied and cert.eps_max == 1.0
    rp = certify(s.with_regime(RPSC), X_norm=0.2)
    assert rp.c2_satisfied
    assert rp.eps_max == pytest.approx(min(1.0, 2 / 1.4))


def test_reference_step_bounds_are_consistent():
    # the reference bounds pin L_psi + L_phi ||X||; the reference steps sit just below them
    for bound, eps in ((0.7916, 0.79), (0.6471, 0.64)):
        total = 2 / bound - 1
        assert rpsc_eps_bound(total, 0.0, 1.0) == pytest.approx(bound, abs=1e-12)
        assert eps < bound


def test_failed_regime_has_zero_step():
    s = linear_set(psi_slope=0.3, phi_slope=-5.0, regime=CVPSC)
    cert = certify(s, X_norm=0.2)
    assert not cert.c1_satisfied and cert.eps_max == 0.0 and not cert.certified
    free_phi = linear_set(phi_slope=0.5, regime=RPSC)
    assert certify(free_phi, X_norm=0.2).eps_max == 0.0


def test_scalar_jacobian():
    m = single_line_feeder(p=-0.3)
    sens = build_sensitivity(m)
    s = linear_set()
    q_eq = 0.01875
    J = closed_loop_jacobian(s, sens, [q_eq], 1.0)
    assert J[0, 0] == pytest.approx(0.3 - 0.5 * 0.2, abs=1e-7)
    assert jacobian_spectral_radius(s, sens, [q_eq], 1.0) == pytest.approx(0.2, abs=1e-7)


def test_jacobian_refuses_clamped_point():
    m = single_line_feeder(p=-0.3)
    s = linear_set(psi_slope=0.9, box=0.05)
    with pytest.raises(NonsmoothPointError):
        closed_loop_jacobian(s, build_sensitivity(m), [0.05], 0.5)


def test_rpsc_jacobian_spectrum_real_and_inside():
    rng = np.random.default_rng(0)
    m = feeder_from_parents([0, 1, 1, 3], rng.uniform(.01, .05, 4), rng.uniform(.01, .05, 4), [GENERATOR] * 4)
    sens = build_sensitivity(m)
    psis = [ScalarShapeFunction.near_linear(a) for a in rng.uniform(-0.8, 0.8, 4)]
    phis = [ScalarShapeFunction.near_linear(-b, center=1.0, sign_mode=NONINCREASING) for b in rng.uniform(1, 40, 4)]
    s = SurrogateSet(m.generators, psis, phis, RPSC, m.q_min, m.q_max)
    cert = certify(s, sens, q_eq=np.zeros(4))
    assert cert.jacobian_spectral_radius < 1


def test_bauer_fike_random_pairs():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        A = rng.normal(size=(n, n))
        A = A + A.T
        E = rng.normal(scale=rng.uniform(0.01, 2), size=(n, n))
        lam_A = np.linalg.eigvalsh(A)
        mu = np.linalg.eigvals(A + E)
        gap = np.max(np.min(np.abs(mu[:, None] - lam_A[None, :]), axis=1))
        assert gap <= np.linalg.norm(E, 2) * (1 + 1e-12) + 1e-12


def test_surrogate_json_roundtrip():
    s = linear_set()
    back = SurrogateSet.from_dict(json.loads(serialize.dumps(s.to_dict())))
    q, v = np.array([0.05]), np.array([1.01])
    assert back.h(q, v) == s.h(q, v)
    assert back.L_phi_max == s.L_phi_max
    inf_cap = ScalarShapeFunction([1.0], [1.0], [0.0])
    assert ScalarShapeFunction.from_dict(inf_cap.to_dict()).slope_cap == math.inf
