from __future__ import annotations

import math

import numpy as np
import pytest

from aos.model import preset
from aos.oracle import DiProblem, di_min_time, planar_collocation_reference


def grid_search_min_time(p: DiProblem, step: float = 1e-4, horizon: float = 30.0) -> float:
    """Shortest one-switch bang-bang time found by scanning the switch instant."""
    a = p.u_max
    best = math.inf
    t1 = np.arange(0.0, horizon, step)
    for sign in (1, -1):
        t2 = t1 + (p.v0 - p.vf) / (sign * a)
        ok = t2 >= 0
        v1 = p.v0 + sign * a * t1
        x = p.x0 + p.v0 * t1 + 0.5 * sign * a * t1**2 + v1 * t2 - 0.5 * sign * a * t2**2
        err = np.where(ok, x - p.xf, np.nan)
        cross = np.flatnonzero(np.sign(err[:-1]) * np.sign(err[1:]) <= 0)
        for i in cross:
            if ok[i] and ok[i + 1]:
                best = min(best, t1[i] + t2[i])
    return best


def test_trivial_problem():
    sol = di_min_time(DiProblem(1.0, 0.0, 1.0, 0.0))
    assert sol.duration == 0.0 and sol.signs == ()


@pytest.mark.parametrize("D", [0.5, 2.0, 9.0])
def test_rest_to_rest_closed_form(D):
    sol = di_min_time(DiProblem(0.0, 0.0, D, 0.0))
    assert sol.duration == pytest.approx(2 * math.sqrt(D), abs=1e-12)
    assert sol.switch_time == pytest.approx(math.sqrt(D), abs=1e-12)
    assert grid_search_min_time(DiProblem(0.0, 0.0, D, 0.0)) == pytest.approx(sol.duration, abs=1e-3)


def test_fig8_task():
    sol = di_min_time(DiProblem(-2.0, 0.0, 0.0, 0.0))
    assert sol.duration == pytest.approx(2 * math.sqrt(2), abs=1e-12)
    assert sol.signs == (1, -1)


def test_matches_grid_search_on_random_problems(rng):
    for _ in range(100):
        p = DiProblem(*rng.uniform(-5, 5, 2) * [1, 0.6], *rng.uniform(-5, 5, 2) * [1, 0.6], u_max=rng.uniform(0.5, 2))
        exact = di_min_time(p)
        assert grid_search_min_time(p) == pytest.approx(exact.duration, abs=1e-3)


def test_profile_reaches_target_within_bounds(rng):
    for _ in range(100):
        p = DiProblem(*rng.uniform(-5, 5, 4), u_max=rng.uniform(0.5, 2))
        sol = di_min_time(p)
        x, v = sol.state(p, sol.duration)
        assert abs(x - p.xf) <= 1e-6 and abs(v - p.vf) <= 1e-6
        for t in np.linspace(0, sol.duration, 25):
            assert abs(sol.control(t)) <= p.u_max
        assert len(sol.signs) <= 2


def test_di_validation():
    with pytest.raises(ValueError):
        DiProblem(0, 0, 1, 0, u_max=0.0)
    with pytest.raises(ValueError):
        DiProblem(0, float("inf"), 1, 0)


def test_collocation_zero_distance():
    res = planar_collocation_reference(preset("STD"), (0, 0), (0, 0))
    assert res.duration == 0.0 and res.converged


def test_collocation_horizontal_10m():
    std = preset("STD")
    coarse = planar_collocation_reference(std, (0, 0), (10, 0), knots=100)
    if not coarse.converged:
        pytest.skip(f"collocation did not converge (defect {coarse.max_defect:.2e})")
    assert coarse.duration == pytest.approx(1.56, rel=0.05)
    fine = planar_collocation_reference(std, (0, 0), (10, 0), knots=200, seed_duration=coarse.duration)
    if not fine.converged:
        pytest.skip(f"refined collocation did not converge (defect {fine.max_defect:.2e})")
    assert abs(fine.duration - coarse.duration) <= 0.01 * coarse.duration
    lo, hi = 4 * std.rotor_thrust_min / (std.mass * std.gravity), 4 * std.rotor_thrust_max / (std.mass * std.gravity)
    assert coarse.controls[:, 1].min() >= lo - 1e-9 and coarse.controls[:, 1].max() <= hi + 1e-9
    assert np.abs(coarse.controls[:, 0]).max() <= 1 + 1e-9


def test_collocation_rejects_too_few_knots():
    with pytest.raises(ValueError):
        planar_collocation_reference(preset("STD"), (0, 0), (1, 0), knots=1)
