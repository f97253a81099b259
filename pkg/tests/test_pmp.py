from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from aos.model import planar_bounds, preset
from aos.pmp import (
    AdjointConfig,
    adjoint_at,
    classify_profile,
    within_flow_band,
    h_consistent_config,
    hamiltonian,
    is_flat,
    piece_count,
    profile_from_arcs,
    random_extremal_setup,
    shoot_extremal,
    singular_flow,
    singular_rate,
    switching_values,
)

BOUNDS = planar_bounds(preset("STD"))
coef = st.floats(-5, 5, allow_nan=False)


def test_adjoint_examples():
    np.testing.assert_allclose(adjoint_at(AdjointConfig((1, 1, 1, 1)), 1.0), (1, 0, 1, 0))
    for t in (-3.0, 0.0, 7.5):
        np.testing.assert_allclose(adjoint_at(AdjointConfig((0, 1, 0, 1)), t), (0, 1, 0, 1))


def test_adjoint_config_validation():
    with pytest.raises(ValueError):
        AdjointConfig((0, 0, 0, 0))
    with pytest.raises(ValueError):
        AdjointConfig((1, 0, 0), 0.1)
    with pytest.raises(ValueError):
        AdjointConfig((1, 0, 0, 1), "guess")
    with pytest.raises(ValueError):
        AdjointConfig((1, 0, 0, 1), rate_sign=0)


@given(st.tuples(coef, coef, coef, coef))
def test_p2_p4_have_at_most_one_zero(c):
    assume(any(c))
    t = np.linspace(-50, 50, 2001)
    _, p2, _, p4 = adjoint_at(AdjointConfig(c), t)
    for p in (p2, p4):
        sign = np.sign(p[p != 0])
        assert np.count_nonzero(np.diff(sign)) <= 1


def test_switching_values_examples():
    sv = switching_values(AdjointConfig((0, 0, 0, 1)), 0.0, 0.0, 1.3)
    assert sv.phi_t == pytest.approx(1.0)
    assert math.isnan(sv.phi_r)
    sv = switching_values(AdjointConfig((0, 1, 0, 0)), 0.0, 0.0, 1.7)
    assert sv.phi_t == pytest.approx(0.0, abs=1e-15)
    assert sv.phi_r_dot == pytest.approx(-1.7)
    with pytest.raises(ValueError):
        switching_values(AdjointConfig((0, 1, 0, 0)), 0.0, 0.0, 0.0)


def test_switching_values_hamiltonian_with_state():
    cfg = AdjointConfig((0.3, -0.2, 0.1, 0.4))
    state = np.array([0.0, 0.5, 0.0, -0.2, 0.3])
    sv = switching_values(cfg, 0.7, 0.3, 1.2, state=state, p5=0.25, u_r=-1.0)
    assert sv.hamiltonian == pytest.approx(float(hamiltonian(cfg, 0.7, state, 0.25, 1.2, -1.0)))
    assert sv.phi_r == 0.25


@settings(max_examples=80)
@given(st.tuples(coef, coef, coef, coef), st.floats(-10, 10), st.sampled_from([-1, 1]), st.floats(0.1, 3))
def test_thrust_switch_on_quarter_turn_from_flow(c, t, side, u_t):
    """theta = Theta(t) +- pi/2 zeroes the thrust switching function."""
    cfg = AdjointConfig(c) if any(c) else AdjointConfig((1, 0, 0, 0))
    _, p2, _, p4 = adjoint_at(cfg, t)
    assume(math.hypot(p2, p4) > 1e-6)
    theta = singular_flow(cfg, 0).theta(t) + side * math.pi / 2
    sv = switching_values(cfg, t, theta, u_t)
    assert abs(sv.phi_t) <= 1e-9 * max(1.0, math.hypot(p2, p4))


def test_singular_flow_examples():
    f = singular_flow(AdjointConfig((0, 1, 0, 1)), 0)
    assert f.is_flat
    for k in (-1, 0, 1, 2):
        assert singular_flow((0, 1, 0, 1), k).theta(3.0) == pytest.approx(math.pi / 4 + k * math.pi)
    f = singular_flow((1, 2, 2, 4), 1)
    assert f.is_flat
    assert f.theta(0.4) == pytest.approx(math.atan(0.5) + math.pi)
    assert f.undefined_instant() == pytest.approx(2.0)
    f = singular_flow((1, 0, 0, 1), 0)
    assert not f.is_flat
    assert f.undefined_instant() is None
    t = np.linspace(-20, 20, 1000)
    assert np.max(np.abs(f.residual(t))) <= 1e-9


def test_singular_flow_is_continuous():
    f = singular_flow((1, 0, 0, 1), 0)
    th = f.theta(np.linspace(-30, 30, 20001))
    assert np.max(np.abs(np.diff(th))) < 0.01


@settings(max_examples=60)
@given(st.tuples(coef, coef, coef, coef), st.floats(-5, 5))
def test_flow_slope_is_singular_rate(c, t):
    assume(any(c) and not is_flat(c, 1e-6))
    cfg = AdjointConfig(c)
    _, p2, _, p4 = adjoint_at(cfg, t)
    assume(math.hypot(p2, p4) > 1e-2)
    f = singular_flow(cfg, 0)
    h = 1e-6
    slope = (f.theta(t + h) - f.theta(t - h)) / (2 * h)
    assert slope == pytest.approx(singular_rate(cfg, t), rel=1e-5, abs=1e-7)


def test_singular_rate_examples():
    assert singular_rate(AdjointConfig((1, 0, 0, 1)), 0.0) == pytest.approx(-1.0)
    assert np.all(singular_rate(AdjointConfig((1, 2, 2, 4)), np.linspace(-5, 1.5, 50)) == 0.0)
    # |u_r| peaks where its denominator is smallest, t* = (c1 c2 + c3 c4) / (c1^2 + c3^2) = 1
    cfg = AdjointConfig((1, 2, 1, 0))
    t = np.linspace(-2, 4, 6001)
    assert t[np.argmax(np.abs(singular_rate(cfg, t)))] == pytest.approx(1.0, abs=1e-3)


def test_flat_biconditional_random(rng):
    for i in range(1000):
        c = rng.normal(size=4)
        if i % 3 == 0:
            mu = rng.normal()
            c[1], c[3] = mu * c[0], mu * c[2]
        elif i % 3 == 1:
            c[3] = c[1] * c[2] / c[0] + rng.choice([1e-13, 1e-11, -1e-10])
        gap = abs(c[1] * c[2] - c[0] * c[3])
        assert is_flat(c) == (gap <= 1e-12)
        f = singular_flow(tuple(c), 0)
        if f.is_flat:
            t = np.linspace(-10, 10, 200)
            assert np.max(np.abs(np.diff(f.theta(t)))) <= 1e-12
            assert np.max(np.abs(f.rate(t))) <= 1e-12


@settings(max_examples=100)
@given(coef, coef, st.floats(-5, 5), st.floats(-10, 10))
def test_flat_roots_coincide(c1, c3, mu, theta):
    assume(abs(c1) > 1e-3 and abs(c3) > 1e-3)
    c = (c1, mu * c1, c3, mu * c3)
    cfg = AdjointConfig(c)
    t2, t4 = c[1] / c[0], c[3] / c[2]
    assert abs(t2 - t4) <= 1e-9
    sv = switching_values(cfg, t2, theta, 1.0)
    assert abs(sv.phi_t) <= 1e-9 and abs(sv.phi_r_dot) <= 1e-9


def test_piece_count_examples():
    assert piece_count(0, 2, 2) == 5
    assert piece_count(1, 4, 2) == 8
    assert piece_count(5, 4, 2) == 12
    for bad in ((-1, 0, 0), (0, -2, 0), (0, 0, 3), (0.5, 0, 0)):
        with pytest.raises(ValueError):
            piece_count(*bad)


def test_classify_examples():
    rep = classify_profile(profile_from_arcs(["bang_high", "singular", "bang_high"]))
    assert rep.rate_structure == "B-S-B"
    assert rep.rate_switches == 2
    assert rep.lemma_compliant and rep.theorem_compliant
    rep = classify_profile(profile_from_arcs(["bang_high"], ["bang_high", "bang_low"] * 3 + ["bang_high"]))
    assert rep.thrust_switches == 6
    assert not rep.theorem_compliant
    rep = classify_profile(profile_from_arcs(["bang_high", "singular", "bang_low", "singular", "bang_high"]))
    assert rep.rate_switches == 4
    assert rep.lemma == "flat" and rep.lemma_compliant
    rep = classify_profile(profile_from_arcs(["bang_high", "bang_low"]))
    assert rep.opposite_bang_pairs == 1


def test_within_flow_band():
    cfg = AdjointConfig((0, 1, 0, 1))
    t = np.linspace(0, 5, 50)
    assert within_flow_band(t, np.full(50, 0.2), cfg)
    assert not within_flow_band(t, np.linspace(0.0, 3 * math.pi, 50), cfg)


def test_shoot_closed_form_pure_bangs():
    """c = (0,0,0,1) from hover: rate stays +1, thrust drops at theta = pi/2."""
    lo, hi = BOUNDS
    p50 = 0.5
    ex = shoot_extremal(AdjointConfig((0, 0, 0, 1), p50), np.zeros(5), 2.0, 1e-4, BOUNDS)
    assert np.all(ex.u_r == 1.0)
    early = ex.t < math.pi / 2 - 1e-3
    late = ex.t > math.pi / 2 + 1e-3
    assert np.all(ex.u_t[early] == hi) and np.all(ex.u_t[late] == lo)
    np.testing.assert_allclose(ex.states[:, 4], ex.t, atol=1e-12)
    np.testing.assert_allclose(ex.p5[early], p50 + hi * (1 - np.cos(ex.t[early])), atol=1e-8)
    np.testing.assert_allclose(ex.p5[late], p50 + hi - lo * np.cos(ex.t[late]), atol=1e-3)
    np.testing.assert_allclose(ex.states[early, 1], hi * (1 - np.cos(ex.t[early])), atol=1e-8)
    thrust = ex.profile.channel_arcs("thrust")
    assert len(thrust) == 2 and thrust[0].t_end == pytest.approx(math.pi / 2, abs=2e-4)
    assert ex.profile.structure["rate"] == "B"


def test_shoot_flat_horizontal_bang_singular_bang():
    """Tilt to the flat flow, hold the tilt, tilt back."""
    lo, hi = BOUNDS
    lam = 1.0 / (hi * math.sqrt(2.0) - 1.0)
    cfg = AdjointConfig((0, lam, 0, lam), "solve", 1)
    ex = shoot_extremal(cfg, np.zeros(5), 3.0, 1e-4, BOUNDS, singular_exit=(2.0, -1))
    rep = classify_profile(ex.profile)
    assert rep.rate_structure == "B-S-B"
    rate = ex.profile.channel_arcs("rate")
    assert rate[1].t_start == pytest.approx(math.pi / 4, abs=1e-3)
    assert abs(ex.hamiltonian()[0]) <= 1e-12
    assert ex.hamiltonian_drift() <= 1e-6
    assert np.all(ex.u_r[ex.singular_mode] == 0.0)


def test_shoot_nonflat_singular_arc_uses_singular_rate():
    lo, hi = BOUNDS
    c = np.array([1.0, 0.5, 0.3, 1.0])
    th0 = singular_flow(tuple(c), 0).theta(0.0)
    x0 = np.array([0.0, 0.2, 0.0, 0.1, th0])
    phi = c[1] * math.sin(th0) + c[3] * math.cos(th0)
    rest = c[0] * x0[1] + c[2] * x0[3] + (hi if phi >= 0 else lo) * phi - c[3]
    cfg = AdjointConfig(tuple(c / rest), 0.0, 1)
    ex = shoot_extremal(cfg, x0, 1.0, 1e-4, BOUNDS)
    assert abs(ex.hamiltonian()[0]) <= 1e-12
    m = ex.singular_mode
    assert m[:100].all()
    np.testing.assert_allclose(ex.u_r[m], singular_rate(cfg, ex.t[m]), atol=1e-6)
    assert ex.profile.structure["rate"].startswith("S")


def test_h_consistent_config_zeroes_hamiltonian(rng):
    for _ in range(20):
        cfg, x0 = random_extremal_setup(rng, BOUNDS)
        ex = shoot_extremal(cfg, x0, 0.01, 1e-3, BOUNDS)
        assert abs(ex.hamiltonian()[0]) <= 1e-12
        assert (cfg.c[0], cfg.c[2]) != (0.0, 0.0)
    cfg = h_consistent_config((0, 1, 0, 1), np.zeros(5), BOUNDS)
    assert abs(cfg.p5_init) >= 0.5 - 1e-12


def test_hamiltonian_conserved_on_random_extremals(rng):
    for _ in range(5):
        cfg, x0 = random_extremal_setup(rng, BOUNDS)
        ex = shoot_extremal(cfg, x0, 10.0, 1e-4, BOUNDS, record_every=10)
        assert ex.hamiltonian_drift() <= 1e-6


def test_shoot_rejects_bad_arguments():
    cfg = AdjointConfig((0, 0, 0, 1), 0.5)
    with pytest.raises(ValueError):
        shoot_extremal(cfg, np.zeros(5), 1.0, 0.0, BOUNDS)
    with pytest.raises(ValueError):
        shoot_extremal(cfg, np.zeros(5), 1.0, 1e-3, (0.0, 2.0))
