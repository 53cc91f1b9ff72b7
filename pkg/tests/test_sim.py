import numpy as np
import pytest

from conftest import random_cvpsc_set
from voltvar.errors import DomainError, NonContractionError
from voltvar.gridmodel import GENERATOR, build_sensitivity, feeder_from_parents, single_line_feeder
from voltvar.sim import (AC, classify_divergence, find_fixed_point, g, run_closed_loop, step,
                         time_varying_run)
from voltvar.surrogate import CVPSC, NONINCREASING, RPSC, ScalarShapeFunction, SurrogateSet, certify


def stand_in(psi_slope=0.3, phi_slope=-0.5, center=1.0, regime=RPSC, box=0.4):
    psi = ScalarShapeFunction.near_linear(psi_slope, width=1e-6)
    phi = ScalarShapeFunction.near_linear(phi_slope, center=center, width=1e-6, sign_mode=NONINCREASING)
    return SurrogateSet((1,), [psi], [phi], regime, [-box], [box])


def in_box(trace, s):
    return bool(np.all(trace.q >= s.q_min) and np.all(trace.q <= s.q_max))


def test_single_step():
    s = stand_in()
    assert step(s, [0.1], [0.99], 0.5) == pytest.approx([0.0675], abs=1e-12)
    with pytest.raises(DomainError):
        step(s, [0.1], [0.99], 1.5)
    with pytest.raises(DomainError):
        step(s, [0.5], [0.99], 0.5)


def test_closed_form_fixed_point():
    m = single_line_feeder(p=-0.3)
    sens = build_sensitivity(m)
    s = stand_in()
    tr = run_closed_loop(s, m, sens, 0.5, [0.3], tol=1e-13)
    assert tr.converged
    assert tr.q[-1] == pytest.approx([0.01875], abs=1e-10)
    assert tr.v[-1] == pytest.approx([0.97375], abs=1e-10)
    q, v = find_fixed_point(s, sens)
    assert q == pytest.approx([0.01875], abs=1e-10)
    assert v == pytest.approx([0.97375], abs=1e-10)
    assert in_box(tr, s)


def test_cvpsc_traces_agree():
    rng = np.random.default_rng(4)
    m = feeder_from_parents([0, 1, 2, 2], rng.uniform(.05, .2, 4), rng.uniform(.05, .2, 4), [GENERATOR] * 4,
                            rng.uniform(-.3, .1, 4), None)
    sens = build_sensitivity(m)
    s = random_cvpsc_set(rng, m, sens)
    assert certify(s, sens).c1_satisfied
    ends = []
    for _ in range(10):
        tr = run_closed_loop(s, m, sens, 0.7, rng.uniform(m.q_min, m.q_max), tol=1e-12, max_steps=5000)
        assert tr.converged and in_box(tr, s)
        ends.append(tr.q[-1])
    ends = np.array(ends)
    assert np.max(np.abs(ends - ends[0])) <= 1e-8


def test_divergence_exhibit():
    m = single_line_feeder(p=-0.3)
    sens = build_sensitivity(m)
    s = stand_in(psi_slope=0.0, phi_slope=-5.0 / sens.X_norm, center=float(sens.v_hat_C[0]))
    cert = certify(s, sens)
    assert cert.eps_max < 1.0
    bad = run_closed_loop(s, m, sens, 1.0, [0.1], max_steps=300)
    assert not bad.converged and classify_divergence(bad)
    good = run_closed_loop(s, m, sens, 0.9 * cert.eps_max, [0.1], max_steps=300)
    assert good.converged and not classify_divergence(good)
    assert in_box(bad, s) and in_box(good, s)


def test_uncertified_fixed_point_refused():
    m = single_line_feeder(p=-0.3)
    s = stand_in(phi_slope=-50.0, regime=CVPSC)
    with pytest.raises(NonContractionError):
        find_fixed_point(s, build_sensitivity(m))


def test_time_varying_windows(case1):
    m, sens = case1
    from voltvar.synthetic import synthetic_profiles
    profiles = synthetic_profiles(m, steps=1440, seed=0)[600:603]
    s = SurrogateSet(m.generators, [ScalarShapeFunction.near_linear(0.2)] * m.c,
                     [ScalarShapeFunction.near_linear(-1.0, center=1.0, sign_mode=NONINCREASING)] * m.c,
                     RPSC, m.q_min, m.q_max)
    tr = time_varying_run(s, m, sens, 0.1, profiles, 120)
    assert tr.steps == 3 * 120
    assert [w["start"] for w in tr.windows] == [0, 120, 240]
    assert all(w["distance_to_orpf"] is not None for w in tr.windows)
    assert in_box(tr, s)
    summ = tr.summary(RPSC)
    assert summ["mean_window_distance"] == pytest.approx(np.mean([w["distance_to_orpf"] for w in tr.windows]))


def test_ac_plant_run(case1):
    m, sens = case1
    s = SurrogateSet(m.generators, [ScalarShapeFunction.near_linear(0.2)] * m.c,
                     [ScalarShapeFunction.near_linear(-1.0, center=1.0, sign_mode=NONINCREASING)] * m.c,
                     CVPSC, m.q_min, m.q_max)
    tr = run_closed_loop(s, m, sens, 1.0, np.zeros(m.c), plant=AC, tol=1e-9)
    assert tr.converged and tr.plant == AC
    lin = run_closed_loop(s, m, sens, 1.0, np.zeros(m.c), tol=1e-9)
    assert np.max(np.abs(tr.q[-1] - lin.q[-1])) < 0.01


def test_g_matches_step(case1):
    m, sens = case1
    s = SurrogateSet(m.generators, [ScalarShapeFunction.near_linear(0.2)] * m.c,
                     [ScalarShapeFunction.near_linear(-1.0, center=1.0, sign_mode=NONINCREASING)] * m.c,
                     RPSC, m.q_min, m.q_max)
    q = np.full(m.c, 0.05)
    assert np.array_equal(g(s, sens, q, 0.3), step(s, q, sens.X @ q + sens.v_hat_C, 0.3))
