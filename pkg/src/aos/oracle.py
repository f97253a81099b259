"""Independent references for tests and benchmarks.

``di_min_time`` is the closed-form minimum-time solution of a double
integrator with a bounded input.  ``planar_collocation_reference`` is a
trapezoidal direct transcription of the non-dimensional planar model with
free final time.  Neither shares code with the polynomial planner apart from
the quasi-Newton routine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .model import QuadrotorParams, nondimensionalize, planar_bounds
from .solver import lbfgs


@dataclass(frozen=True)
class DiProblem:
    x0: float
    v0: float
    xf: float
    vf: float
    u_max: float = 1.0

    def __post_init__(self) -> None:
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")
        if not all(math.isfinite(v) for v in (self.x0, self.v0, self.xf, self.vf)):
            raise ValueError("boundary values must be finite")


@dataclass(frozen=True)
class DiSolution:
    duration: float
    switch_time: float
    signs: tuple[int, ...]
    u_max: float

    def control(self, t: float) -> float:
        """Optimal input at time ``t``."""
        if not self.signs:
            return 0.0
        if len(self.signs) == 1 or t < self.switch_time:
            return self.signs[0] * self.u_max
        return self.signs[1] * self.u_max

    def state(self, problem: DiProblem, t: float) -> tuple[float, float]:
        """Exact position and velocity at ``t`` under the bang-bang profile."""
        x, v = problem.x0, problem.v0
        arcs = [(self.switch_time, self.signs[0])] if len(self.signs) == 2 else []
        rest = self.duration - (self.switch_time if arcs else 0.0)
        if self.signs:
            arcs.append((rest, self.signs[-1]))
        elapsed = 0.0
        for length, sign in arcs:
            dt = min(length, max(t - elapsed, 0.0))
            a = sign * self.u_max
            x, v = x + v * dt + 0.5 * a * dt * dt, v + a * dt
            elapsed += length
        return x, v


def di_min_time(problem: DiProblem) -> DiSolution:
    """Minimum time of ``x'' = u``, ``|u| <= u_max``, between two states.

    The optimal input is bang-bang with at most one switch.  For each sign
    order the extreme velocity reached at the switch follows from the
    position change, and the shorter feasible candidate wins.
    """
    a = problem.u_max
    dx = problem.xf - problem.x0
    v0, vf = problem.v0, problem.vf
    scale = max(1.0, abs(dx), v0 * v0, vf * vf)
    if abs(dx) <= 1e-15 * scale and abs(vf - v0) <= 1e-15 * scale:
        return DiSolution(0.0, 0.0, (), a)
    best = None
    for first in (1, -1):
        # v_s**2 = first * a * dx + (v0**2 + vf**2) / 2 at the switch
        rad = first * a * dx + 0.5 * (v0 * v0 + vf * vf)
        if rad < -1e-12 * scale:
            continue
        root = math.sqrt(max(rad, 0.0))
        for vs in (root, -root):
            t1 = first * (vs - v0) / a
            t2 = first * (vs - vf) / a
            if t1 < -1e-12 or t2 < -1e-12:
                continue
            t1, t2 = max(t1, 0.0), max(t2, 0.0)
            if best is None or t1 + t2 < best[0]:
                best = (t1 + t2, t1, first)
    if best is None:  # pragma: no cover - the two sign orders always cover the plane
        raise RuntimeError("no bang-bang candidate found")
    total, t1, first = best
    tol = 1e-12 * max(1.0, total)
    if t1 <= tol:
        return DiSolution(total, 0.0, (-first,), a)
    if total - t1 <= tol:
        return DiSolution(total, total, (first,), a)
    return DiSolution(total, t1, (first, -first), a)


# --------------------------------------------------------------------------
# Planar collocation reference.


@dataclass(frozen=True)
class CollocationResult:
    duration: float
    duration_hat: float
    knots: int
    max_defect: float
    converged: bool
    states: NDArray[np.float64]
    controls: NDArray[np.float64]
    iterations: int


def _planar_f(X, U):
    th = X[:, 4]
    ut = U[:, 1]
    F = np.empty_like(X)
    F[:, 0] = X[:, 1]
    F[:, 1] = ut * np.sin(th)
    F[:, 2] = X[:, 3]
    F[:, 3] = ut * np.cos(th) - 1.0
    F[:, 4] = U[:, 0]
    return F


class _Collocation:
    """Augmented Lagrangian of the trapezoidal defects in scaled variables.

    Defects are divided by the state scales and multiplied by ``K`` so they
    read as rate mismatches independent of the knot count.
    """

    def __init__(self, x0, xf, K, lo, hi):
        self.x0 = np.asarray(x0, dtype=float)
        self.xf = np.asarray(xf, dtype=float)
        self.K = K
        self.lo = np.array([-1.0, lo])
        self.hi = np.array([1.0, hi])
        dist = max(1.0, float(np.hypot(*(self.xf - self.x0)[[0, 2]])))
        self.sx = np.array([dist, math.sqrt(dist), dist, math.sqrt(dist), 1.0])
        self.n_inner = (K - 1) * 5

    def unpack(self, z):
        K = self.K
        X = np.empty((K + 1, 5))
        X[0], X[-1] = self.x0, self.xf
        X[1:-1] = z[: self.n_inner].reshape(K - 1, 5) * self.sx
        xi = z[self.n_inner : self.n_inner + 2 * (K + 1)].reshape(K + 1, 2)
        U = self.lo + (self.hi - self.lo) * 0.5 * (1.0 + np.sin(xi))
        T = float(np.logaddexp(0.0, z[-1]))
        return X, xi, U, T

    def defects(self, z):
        X, _, U, T = self.unpack(z)
        F = _planar_f(X, U)
        h = T / self.K
        return self.K * (X[1:] - X[:-1] - 0.5 * h * (F[1:] + F[:-1])) / self.sx

    def merit(self, z, lam, mu):
        K = self.K
        X, xi, U, T = self.unpack(z)
        F = _planar_f(X, U)
        h = T / K
        C = K * (X[1:] - X[:-1] - 0.5 * h * (F[1:] + F[:-1])) / self.sx
        val = T + float(np.sum(lam * C)) + 0.5 * mu * float(np.sum(C * C))
        G = K * (lam + mu * C) / self.sx  # d merit / d unscaled defect
        Gp = np.zeros((K + 1, 5))  # G_{k-1}
        Gn = np.zeros((K + 1, 5))  # G_k
        Gp[1:] = G
        Gn[:-1] = G
        S = Gp + Gn
        th = X[:, 4]
        ut = U[:, 1]
        gX = Gp - Gn
        gX[:, 1] -= 0.5 * h * S[:, 0]
        gX[:, 3] -= 0.5 * h * S[:, 2]
        gX[:, 4] -= 0.5 * h * (S[:, 1] * ut * np.cos(th) - S[:, 3] * ut * np.sin(th))
        gU = np.empty((K + 1, 2))
        gU[:, 0] = -0.5 * h * S[:, 4]
        gU[:, 1] = -0.5 * h * (S[:, 1] * np.sin(th) + S[:, 3] * np.cos(th))
        gT = 1.0 - 0.5 / K * float(np.sum(G * (F[1:] + F[:-1])))
        g = np.concatenate(
            [
                (gX[1:-1] * self.sx).ravel(),
                (gU * (self.hi - self.lo) * 0.5 * np.cos(xi)).ravel(),
                [gT * 0.5 * (1.0 + math.tanh(0.5 * z[-1]))],
            ]
        )
        return val, g

    def initial(self, T_guess):
        K = self.K
        s = np.linspace(0.0, 1.0, K + 1)
        blend = 3 * s**2 - 2 * s**3
        X = self.x0 + np.outer(blend, self.xf - self.x0)
        dblend = (6 * s - 6 * s**2) / T_guess
        X[:, 1] = (self.xf - self.x0)[0] * dblend
        X[:, 3] = (self.xf - self.x0)[2] * dblend
        # hover-ish thrust, level attitude
        u_t = np.clip(1.0, self.lo[1] + 1e-3, self.hi[1] - 1e-3)
        xi_t = math.asin(2 * (u_t - self.lo[1]) / (self.hi[1] - self.lo[1]) - 1)
        xi = np.column_stack([np.zeros(K + 1), np.full(K + 1, xi_t)])
        tau = math.log(math.expm1(T_guess))
        return np.concatenate([(X[1:-1] / self.sx).ravel(), xi.ravel(), [tau]])


def planar_collocation_reference(params: QuadrotorParams, start_xz, end_xz, knots: int = 100, *,
                                 defect_tol: float = 1e-6, outer: int = 30, seed_duration: float | None = None
                                 ) -> CollocationResult:
    """Minimum-time rest-to-rest manoeuvre of the planar model by collocation.

    ``start_xz`` and ``end_xz`` are dimensional ``(x, z)`` positions in metres;
    the vehicle starts and ends level and at rest.  The pitch rate is bounded
    by the pitch-axis limit and the collective by the Model-S range.
    """
    if knots < 2:
        raise ValueError("need at least two knots")
    _, p0 = nondimensionalize(params, 0.0, np.asarray(start_xz, dtype=float))
    _, pf = nondimensionalize(params, 0.0, np.asarray(end_xz, dtype=float))
    x0 = np.array([p0[0], 0.0, p0[1], 0.0, 0.0])
    xf = np.array([pf[0], 0.0, pf[1], 0.0, 0.0])
    w = params.pitch_rate_max
    dist = float(np.hypot(*(pf - p0)))
    if dist < 1e-12:
        return CollocationResult(0.0, 0.0, knots, 0.0, True, np.vstack([x0, xf]), np.zeros((2, 2)), 0)
    lo, hi = planar_bounds(params)
    prob = _Collocation(x0, xf, knots, lo, hi)
    if seed_duration is None:
        a_cap = 0.5 * math.sqrt(max(hi * hi - 1.0, 1e-6))
        seed_hat = 2.0 * math.sqrt(dist / a_cap) + 4.0
    else:
        seed_hat = seed_duration * w
    z = prob.initial(seed_hat)
    lam = np.zeros((knots, 5))
    mu = 10.0
    iterations = 0
    viol = float(np.max(np.abs(prob.defects(z))))
    for _ in range(outer):
        res = lbfgs(lambda v: prob.merit(v, lam, mu), z, memory=30, max_iter=5000,
                    gtol=1e-8, past=20, delta=1e-10)
        z = res.x
        iterations += res.nit
        C = prob.defects(z)
        new_viol = float(np.max(np.abs(C)))
        lam = lam + mu * C
        if new_viol <= defect_tol:
            viol = new_viol
            break
        if new_viol > 0.25 * viol:
            mu *= 10.0
        viol = new_viol
    X, _, U, T = prob.unpack(z)
    return CollocationResult(T / w, T, knots, viol, viol <= defect_tol, X, U, iterations)
