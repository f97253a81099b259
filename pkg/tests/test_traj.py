from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aos.traj import (
    T_FLOOR,
    PiecewiseTrajectory,
    boundary_gradients,
    hermite_inverse,
    node_weights,
    piece_from_boundary,
    trajectory_from_junctions,
)


def test_hermite_cubic():
    piece = piece_from_boundary([[0.0], [0.0]], [[1.0], [0.0]], 1.0)
    np.testing.assert_allclose(piece.coeffs, [[0, 0, 3, -2]], atol=1e-15)
    t = np.linspace(0, 1, 11)
    np.testing.assert_allclose(piece.evaluate(t, 0)[:, 0, 0], 3 * t**2 - 2 * t**3, atol=1e-15)


def test_constant_piece():
    stack = np.zeros((4, 4))
    stack[0] = [1.0, -2.0, 3.0, 0.5]
    piece = piece_from_boundary(stack, stack, 2.5)
    vals = piece.evaluate(np.linspace(0, 2.5, 7), 4)
    np.testing.assert_allclose(vals[:, 0], np.broadcast_to(stack[0], (7, 4)), atol=1e-14)
    np.testing.assert_allclose(vals[:, 1:], 0.0, atol=1e-14)


@pytest.mark.parametrize("s", [2, 3, 4])
def test_boundary_round_trip(s, rng):
    for _ in range(20):
        a, b = rng.normal(size=(2, s, 4)) * 3
        T = rng.uniform(0.01, 10)
        piece = piece_from_boundary(a, b, T)
        ends = piece.evaluate([0.0, T], s - 1)
        np.testing.assert_allclose(ends[0], a, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(ends[1], b, rtol=1e-9, atol=1e-9 * max(1.0, np.abs(b).max()))


def test_piece_rejects_bad_durations():
    z = np.zeros((3, 4))
    for T in (0.0, -1.0, T_FLOOR / 2):
        with pytest.raises(ValueError):
            piece_from_boundary(z, z, T)
    with pytest.raises(ValueError):
        piece_from_boundary(np.zeros((3, 4)), np.zeros((2, 4)), 1.0)


def random_trajectory(rng, s=4, n=4):
    stacks = rng.normal(size=(n + 1, s, 4))
    return trajectory_from_junctions(stacks[0], stacks[1:-1], stacks[-1], rng.uniform(0.2, 2.0, size=n)), stacks


def test_evaluate_endpoints_and_continuity(rng):
    traj, stacks = random_trajectory(rng)
    np.testing.assert_allclose(traj.evaluate(0.0, 3), stacks[0], atol=1e-9)
    np.testing.assert_allclose(traj.evaluate(traj.total_duration, 3), stacks[-1], atol=1e-9)
    assert traj.junction_mismatch() <= 1e-9
    for k in range(1, len(traj)):
        tb = traj.breaks[k]
        left = traj.pieces[k - 1].evaluate([traj.pieces[k - 1].duration], 3)[0]
        right = traj.evaluate(tb, 3)
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-9)
    assert traj.total_duration == pytest.approx(traj.durations.sum())
    with pytest.raises(ValueError):
        traj.evaluate(traj.total_duration + 1.0)
    with pytest.raises(ValueError):
        traj.evaluate(-0.1)
    many = traj.evaluate_many(np.linspace(0, traj.total_duration, 33), 4)
    single = np.stack([traj.evaluate(t, 4) for t in np.linspace(0, traj.total_duration, 33)])
    np.testing.assert_allclose(many, single, atol=1e-12)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        PiecewiseTrajectory([])
    a = piece_from_boundary(np.zeros((3, 4)), np.ones((3, 4)), 1.0)
    b = piece_from_boundary(np.zeros((4, 4)), np.ones((4, 4)), 1.0)
    with pytest.raises(ValueError):
        PiecewiseTrajectory([a, b])


def test_json_round_trip(rng):
    traj, _ = random_trajectory(rng)
    back = PiecewiseTrajectory.from_json(traj.to_json())
    for p, q in zip(traj.pieces, back.pieces):
        np.testing.assert_array_equal(p.coeffs, q.coeffs)
        assert p.duration == q.duration
    data = traj.to_dict()
    data["s"] = 3
    with pytest.raises(ValueError):
        PiecewiseTrajectory.from_dict(data)


def test_boundary_gradients_hermite_example():
    T = 1.7
    g = boundary_gradients([[0.0], [0.0]], [[1.0], [0.0]], T)
    np.testing.assert_allclose(g.d_end[:, 0], [0, 0, 3 / T**2, -2 / T**3], rtol=1e-14)


def coeffs(a, b, T, basis):
    piece = piece_from_boundary(a, b, T, t_floor=0.0)
    return piece.time_coeffs() if basis == "time" else piece.coeffs


@pytest.mark.parametrize("basis", ["time", "normalized"])
def test_boundary_gradients_finite_differences(basis, rng):
    h = 1e-6
    for _ in range(50):
        s = int(rng.integers(2, 5))
        a, b = rng.normal(size=(2, s, 1))
        T = rng.uniform(0.3, 3.0)
        g = boundary_gradients(a, b, T, basis)
        fd_T = (coeffs(a, b, T + h, basis) - coeffs(a, b, T - h, basis))[0] / (2 * h)
        assert np.max(np.abs(fd_T - g.d_duration[:, 0])) / max(1.0, np.abs(fd_T).max()) <= 1e-5
        for r in range(s):
            for which, D in (("start", g.d_start), ("end", g.d_end)):
                ap, am, bp, bm = a.copy(), a.copy(), b.copy(), b.copy()
                if which == "start":
                    ap[r] += h
                    am[r] -= h
                else:
                    bp[r] += h
                    bm[r] -= h
                fd = (coeffs(ap, bp, T, basis) - coeffs(am, bm, T, basis))[0] / (2 * h)
                assert np.max(np.abs(fd - D[:, r])) / max(1.0, np.abs(fd).max()) <= 1e-5


@settings(max_examples=50)
@given(st.integers(2, 4), st.floats(0.01, 20), st.floats(-3, 3), st.integers(0, 2**31))
def test_coefficients_linear_in_boundary(s, T, alpha, seed):
    r = np.random.default_rng(seed)
    a1, b1, a2, b2 = r.normal(size=(4, s, 4))
    lhs = piece_from_boundary(a1 + alpha * a2, b1 + alpha * b2, T).coeffs
    rhs = piece_from_boundary(a1, b1, T).coeffs + alpha * piece_from_boundary(a2, b2, T).coeffs
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, np.abs(rhs).max()))


@settings(max_examples=50)
@given(st.integers(2, 4), st.floats(0.05, 5), st.floats(0.2, 5), st.floats(0, 1), st.integers(0, 2**31))
def test_time_scaling(s, T, alpha, frac, seed):
    """Stretching time by alpha scales the r-th derivative by alpha**-r."""
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(2, s, 4))
    scale = alpha ** -np.arange(s)
    p1 = piece_from_boundary(a, b, T)
    p2 = piece_from_boundary(a * scale[:, None], b * scale[:, None], alpha * T)
    v1 = p1.evaluate([frac * T], s)[0]
    v2 = p2.evaluate([frac * alpha * T], s)[0]
    expect = v1 * (alpha ** -np.arange(s + 1))[:, None]
    np.testing.assert_allclose(v2, expect, rtol=1e-8, atol=1e-8 * max(1.0, np.abs(expect).max()))


@pytest.mark.parametrize("s", [2, 3, 4])
def test_interpolation_system_conditioning(s):
    V = np.linalg.inv(hermite_inverse(s))
    orders = np.concatenate([np.arange(s), np.arange(s)])
    for T in (T_FLOOR, 0.1, 1.0, 10.0, 100.0):
        # time-basis system: row r of V is scaled by T**-r, column i by T**i
        A = V * (T ** -orders)[:, None] * (T ** np.arange(2 * s))[None, :]
        assert np.isfinite(np.linalg.cond(A))
        piece = piece_from_boundary(np.ones((s, 1)), -np.ones((s, 1)), T)
        assert np.all(np.isfinite(piece.coeffs))


def test_node_weights_reproduce_piece(rng):
    s = 3
    a, b = rng.normal(size=(2, s, 4))
    T = 0.8
    taus = np.linspace(0, 1, 9)
    W = node_weights(s, taus, s)
    norm = np.concatenate([a * T ** np.arange(s)[:, None], b * T ** np.arange(s)[:, None]])
    vals = np.einsum("qrj,jc->qrc", W, norm) * (T ** -np.arange(s + 1))[None, :, None]
    np.testing.assert_allclose(vals, piece_from_boundary(a, b, T).evaluate(taus * T, s), atol=1e-10)
