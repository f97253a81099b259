from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aos.model import PRESETS, preset
from aos.oracle import DiProblem, di_min_time
from aos.pmp import piece_count
from aos.solver import (
    AccelBox,
    AllAttemptsFailed,
    InfeasibleBoundary,
    PlanProblem,
    QuadConstraints,
    Solution,
    SolverOptions,
    Transcription,
    Waypoint,
    _build_two_state,
    _scales,
    hover_problem,
    lbfgs,
    objective_and_gradient,
    random_state_problem,
    rest_to_rest,
    robust_aos,
    sample_solution,
    sample_times,
    solve_generic,
    solve_two_state,
    solve_waypoints,
    tilted_stack,
)
from aos.traj import T_FLOOR

STD = preset("STD")
OPTS = SolverOptions()


def two_state_transcription(model="R", N=3, dist=3.0, seed=0, yaw_free=False):
    con = QuadConstraints(STD, model)
    prob = rest_to_rest(model, STD, (0, 0, 0), (dist, 0, 0))
    tr = _build_two_state(con, prob.start_stack, prob.end_stack, N, OPTS, dist, 0.4, True)
    if yaw_free:
        free = tr.free.copy()
        free[1:-1, :, 3] = True
        scale = np.broadcast_to(_scales(con.s, 4, dist, 0.4, True), tr.template.shape).copy()
        tr = Transcription(con, tr.template, free, scale, OPTS, t_ref=0.4 * N)
    r = np.random.default_rng(seed)
    x = r.normal(size=tr.n_free + N) * 0.5
    x[tr.n_free :] = r.uniform(-1.5, -0.5, size=N)
    return tr, x


def fd_gradient(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("model", ["S", "R"])
@pytest.mark.parametrize("yaw_free", [False, True])
def test_objective_gradient_matches_finite_differences(model, yaw_free):
    for seed in range(3):
        tr, x = two_state_transcription(model, seed=seed, yaw_free=yaw_free)
        w = 1e2
        _, g = objective_and_gradient(tr, x, w)
        fd = fd_gradient(lambda z: tr.objective(z, w, grad=False), x)
        assert np.max(np.abs(g - fd)) / max(1.0, np.abs(fd).max()) <= 1e-5


def test_waypoint_objective_gradient_with_balls():
    prob = rest_to_rest("R", STD, (0, 0, 0), (6, 0, 0), waypoints=(Waypoint((3, 1, 0), 0.3),), pieces_per_segment=2)
    sol = solve_waypoints(prob, SolverOptions(max_iter=3, weights=(1e2,), tighten_rounds=0), _audit=False)
    assert sol.pieces == 4
    con = QuadConstraints(STD, "R")
    template = np.zeros((3, 4, 4))
    template[-1, 0, 0] = 6.0
    free = np.zeros_like(template, dtype=bool)
    free[1, :, :3] = True
    scale = np.ones_like(template)
    tr = Transcription(con, template, free, scale, OPTS, balls=[(1, np.array([3.0, 1.0, 0.0]), 0.3)], t_ref=2.0)
    x = np.random.default_rng(3).normal(size=tr.n_free + 2)
    _, g = objective_and_gradient(tr, x, 1e3)
    fd = fd_gradient(lambda z: tr.objective(z, 1e3, grad=False), x)
    assert np.max(np.abs(g - fd)) / max(1.0, np.abs(fd).max()) <= 1e-5


def test_feasible_point_cost_is_total_time():
    con = QuadConstraints(STD, "R")
    prob = rest_to_rest("R", STD, (0, 0, 0), (1, 0, 0))
    tr = _build_two_state(con, prob.start_stack, prob.end_stack, 2, OPTS, 1.0, 2.0, True)
    x = tr.encode(tr.template, [3.0, 4.0])
    assert tr.max_violation(x) == 0.0
    assert tr.objective(x, 1e5, grad=False) == pytest.approx(7.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(1.0, 1e4), st.floats(1.0, 100.0), st.integers(0, 1000))
def test_cost_nondecreasing_in_weight(w, factor, seed):
    tr, x = two_state_transcription("S", seed=seed)
    assert tr.objective(x, w * factor, grad=False) >= tr.objective(x, w, grad=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-800, 50), min_size=3, max_size=3))
def test_durations_stay_above_floor(raw):
    tr, x = two_state_transcription("S")
    x[tr.n_free :] = raw
    _, T = tr.decode(x)
    assert np.all(T >= T_FLOOR)


@pytest.mark.parametrize("model", ["S", "R"])
def test_encode_decode_round_trip(model, rng):
    tr, _ = two_state_transcription(model)
    stacks = tr.template.copy()
    stacks[tr.free] = rng.normal(size=tr.n_free)
    durs = rng.uniform(0.05, 2.0, size=tr.K)
    Z, T = tr.decode(tr.encode(stacks, durs))
    np.testing.assert_allclose(Z, stacks, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(T, durs, rtol=1e-12, atol=1e-12)


def test_lbfgs_history_is_monotone():
    def rosen(x):
        f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
        g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
        return f, g

    res = lbfgs(rosen, np.array([-1.2, 1.0]), gtol=1e-10, past=0)
    assert np.all(np.diff(res.history) <= 0)
    np.testing.assert_allclose(res.x, [1, 1], atol=1e-6)


def test_stage_histories_are_monotone(warm):
    sol = solve_two_state(rest_to_rest("R", STD, (0, 0, 0), (3, 0, 0)), 5)
    bounds = list(sol.stage_starts) + [len(sol.objective_history)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        assert np.all(np.diff(sol.objective_history[a:b]) <= 1e-12)


def test_hover_solve_is_instant(warm):
    for model in ("S", "R"):
        sol = solve_two_state(hover_problem(model, STD, (1, 2, 3)), 3)
        assert sol.total_time <= 0.05
        assert sol.converged


def test_double_integrator_embedding(warm):
    opts = SolverOptions(delta=1e-6)
    ref = di_min_time(DiProblem(-2.0, 0.0, 0.0, 0.0)).duration
    sol = solve_generic(AccelBox(), [[-2.0], [0.0], [0.0]], [[0.0], [0.0], [0.0]], 7, opts, yaw_channel=False)
    assert sol.converged
    assert (sol.total_time - ref) / ref <= 0.03


def test_double_integrator_more_pieces_never_much_worse(warm):
    opts = SolverOptions(delta=1e-6)
    start, end = [[-2.0], [0.0], [0.0]], [[0.0], [0.0], [0.0]]
    times = [solve_generic(AccelBox(), start, end, N, opts, yaw_channel=False).total_time for N in range(1, 9)]
    for a, b in zip(times[:-1], times[1:]):
        assert b <= a * 1.01


def test_horizontal_3m_model_r(warm):
    sol = solve_two_state(rest_to_rest("R", STD, (0, 0, 0), (3, 0, 0)), 5)
    assert sol.converged
    assert sol.total_time == pytest.approx(1.084, rel=0.08)
    assert sol.total_time == pytest.approx(sum(sol.piece_times), abs=1e-12)
    assert sol.trajectory.junction_mismatch() <= 1e-9
    assert sol.max_violation <= OPTS.feas_tol
    samp = sample_solution(sol, 0.002, STD)
    assert samp.rotors.min() >= STD.rotor_thrust_min - 1e-3
    assert samp.rotors.max() <= STD.rotor_thrust_max + 1e-3


def test_dense_audit_of_converged_solution(warm):
    sol = solve_two_state(rest_to_rest("S", STD, (0, 0, 0), (6, 0, 0)), 5)
    assert sol.converged
    t = np.linspace(0, sol.total_time, 16 * 10 * sol.pieces)
    d = sol.trajectory.evaluate_many(t, 3)
    from aos.flatness import constraint_batch, kernel_params

    viol, _ = constraint_batch(d, kernel_params(STD), "S", False)
    assert viol.max() <= 2 * OPTS.feas_tol


def test_robust_aos_starts_at_twelve(warm):
    assert piece_count(5, 4, 2) == 12
    sol = robust_aos(rest_to_rest("R", STD, (0, 0, 0), (3, 0, 0)))
    assert sol.attempts[0] == 12
    assert sol.converged and sol.pieces <= 12


def test_robust_aos_reports_failure():
    opts = SolverOptions(max_iter=1, weights=(1e2,), tighten_rounds=0, feas_tol=1e-12)
    with pytest.raises(AllAttemptsFailed) as info:
        robust_aos(rest_to_rest("R", STD, (0, 0, 0), (10, 0, 0), n_se=0), opts)
    assert isinstance(info.value.best, Solution)


def test_infeasible_boundary_rejected():
    start = np.zeros((4, 4))
    start[1, 3] = 50.0  # yaw rate far above the bound
    prob = PlanProblem("R", STD, start, np.zeros((4, 4)))
    with pytest.raises(InfeasibleBoundary):
        solve_two_state(prob, 2)


def test_problem_validation():
    with pytest.raises(ValueError):
        PlanProblem("X", STD, np.zeros((3, 4)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        PlanProblem("S", STD, np.zeros((3, 4)), np.zeros((3, 4)), n_se=3)
    with pytest.raises(ValueError):
        PlanProblem("S", STD, np.zeros((3, 4)), np.zeros((3, 4)), pieces_per_segment=0)
    with pytest.raises(ValueError):
        Waypoint((0, 0, 0), -1.0)
    with pytest.raises(ValueError):
        solve_two_state(hover_problem("S", STD), 0)
    prob = PlanProblem("R", STD, [[1, 2, 3, 0]], [[0, 0, 0, 0]])
    assert prob.start_stack.shape == (4, 4)
    assert prob.segment_pieces() == 5


def test_midpoint_waypoint_cannot_help(warm):
    base = solve_two_state(rest_to_rest("R", STD, (0, 0, 0), (6, 0, 0)), 5)
    wp = rest_to_rest("R", STD, (0, 0, 0), (6, 0, 0), waypoints=(Waypoint((3, 0, 0), 0.0),), pieces_per_segment=3)
    sol = solve_waypoints(wp, pieces=3)
    assert sol.converged
    assert sol.total_time >= base.total_time - 1e-6
    assert sol.waypoint_misses[0] <= 1e-6


def test_waypoint_ball_and_duplicates(warm):
    prob = rest_to_rest(
        "S", STD, (0, 0, 0), (4, 0, 0),
        waypoints=(Waypoint((2, 1, 0), 0.3), Waypoint((2, 1, 0), 0.3)),
        pieces_per_segment=2,
    )
    sol = solve_waypoints(prob)
    assert sol.converged
    assert max(sol.waypoint_misses) <= 0.3
    with pytest.raises(ValueError):
        solve_waypoints(rest_to_rest("S", STD, (0, 0, 0), (4, 0, 0)))


def test_sample_rows_and_hover(warm):
    sol = solve_two_state(hover_problem("R", STD, (1, 2, 3)), 2)
    dt = sol.total_time / 3.7
    samp = sample_solution(sol, dt, STD)
    assert len(samp.t) == math.floor(sol.total_time / dt) + 2
    assert samp.t[-1] == sol.total_time
    table = samp.table()
    assert table.shape[1] == len(samp.COLUMNS)
    np.testing.assert_allclose(table[:, 1:], np.broadcast_to(table[0, 1:], table[:, 1:].shape), atol=1e-9)
    np.testing.assert_allclose(samp.rotors, 2.4525, atol=1e-9)


def test_sample_times_arithmetic():
    ts = sample_times(1.0, 0.3)
    assert len(ts) == math.floor(1.0 / 0.3) + 2
    assert ts[-1] == 1.0
    ts = sample_times(1.2, 0.3)
    assert len(ts) == 5 and ts[-1] == 1.2
    with pytest.raises(ValueError):
        sample_times(1.0, 0.0)


def test_tilted_stack_geometry():
    st_ = tilted_stack("R", (1, 2, 3), (4, 5, 6), 0.0, math.pi / 4)
    assert st_.shape == (4, 4)
    thrust = st_[2, :3] + np.array([0, 0, 9.81])
    np.testing.assert_allclose(np.linalg.norm(thrust), 9.81)
    np.testing.assert_allclose(thrust / 9.81, [math.sqrt(0.5), 0, math.sqrt(0.5)], atol=1e-12)


def test_random_state_problem_ranges(rng):
    for _ in range(20):
        prob = random_state_problem(rng, STD, "S")
        np.testing.assert_array_equal(prob.start_stack[0, :3], 0.0)
        assert np.linalg.norm(prob.start_stack[1, :3]) <= 10.0
        assert np.all(np.isin(prob.end_stack[0, :2], [-10, -5, 0, 5, 10]))
        assert prob.end_stack[0, 2] in (-5, 0, 5)
        zb = (prob.end_stack[2, :3] + np.array([0, 0, 9.81])) / 9.81
        assert np.linalg.norm(zb) == pytest.approx(1.0)
        assert zb[2] >= -1e-12  # tilt of at most pi/2


@pytest.mark.parametrize("name", ["RPG", "FGG"])
def test_other_presets_converge(name, warm):
    sol = solve_two_state(rest_to_rest("R", PRESETS[name], (0, 0, 0), (4, 2, 1)), 5)
    assert sol.converged
