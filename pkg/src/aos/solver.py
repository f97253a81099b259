"""Minimum-time planning over piecewise-polynomial flat outputs.

Decision variables are the free entries of the junction derivative stacks
(orders ``0..s-1``) and one raw duration per piece, ``T = T_floor + softplus(tau)``.
The constrained problem is transcribed with a cubic hinge penalty::

    J = sum_k T_k + w * sum_k (T_k / Q) * sum_q sum_i max(0, h_i(node_q))**3

and minimised by L-BFGS with an increasing penalty weight ``w``.  Node values
come from the constant normalised-time weights of :mod:`aos.traj`, so the
gradient w.r.t. every junction entry and duration is assembled in closed form
from the constraint Jacobians.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import flatness
from .flatness import DerivativeStack, kernel_params
from .model import GRAVITY, QuadrotorParams
from .pmp import piece_count
from .traj import T_FLOOR, PiecewiseTrajectory, node_weights, piece_from_boundary


class SolverError(RuntimeError):
    pass


class InfeasibleBoundary(SolverError):
    """The prescribed start or end stack already violates the constraints."""


class AllAttemptsFailed(SolverError):
    def __init__(self, message: str, best: "Solution | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class SolverOptions:
    nodes: int = 16
    audit_factor: int = 10
    weights: tuple[float, ...] = (1e2, 1e3, 1e4, 1e5)
    feas_tol: float = 1e-3
    gtol_rel: float = 1e-5
    max_iter: int = 3000
    past: int = 20
    delta: float = 3e-5
    memory: int = 50
    margin: float = 0.0
    tighten_rounds: int = 5
    max_refine: int = 4
    tighten_factor: float = 1.5
    t_floor: float = T_FLOOR


# --------------------------------------------------------------------------
# Constraint models.


class QuadConstraints:
    """Actuation limits of a quadrotor; Model S (s=3) or Model R (s=4)."""

    channels = 4

    def __init__(self, params: QuadrotorParams, model: str):
        if model not in ("S", "R"):
            raise ValueError("model must be 'S' or 'R'")
        self.params = params
        self.model = model
        self.s = 3 if model == "S" else 4
        self._kp = kernel_params(params)
        self.size = 5 if model == "S" else 11

    def __call__(self, derivs: NDArray[np.float64], jacobian: bool = True, active_floor: float = -math.inf,
                 with_yaw: bool = True):
        return flatness.constraint_batch(derivs, self._kp, self.model, jacobian, active_floor, with_yaw)

    def penalty(self, derivs: NDArray[np.float64], shift: float = 0.0, with_yaw: bool = False):
        """Values and the per-node gradient of ``sum_i max(0, h_i + shift)**3``."""
        if not with_yaw:
            return flatness.penalty_batch(derivs, self._kp, self.model, shift)
        viol, jac = self(derivs, True, -shift, True)
        e = np.maximum(viol + shift, 0.0)
        return viol, np.einsum("ni,nirc->nrc", 3.0 * e * e, jac)


class AccelBox:
    """``|y''| <= u_max`` on a single channel (double-integrator embedding)."""

    channels = 1
    size = 2

    def __init__(self, u_max: float = 1.0, s: int = 3):
        self.u_max = u_max
        self.s = s

    def __call__(self, derivs: NDArray[np.float64], jacobian: bool = True, active_floor: float = -math.inf,
                 with_yaw: bool = True):
        a = derivs[:, 2, 0]
        viol = np.stack([a - self.u_max, -a - self.u_max], axis=1)
        if not jacobian:
            return viol, None
        jac = np.zeros((derivs.shape[0], 2) + derivs.shape[1:])
        jac[:, 0, 2, 0] = 1.0
        jac[:, 1, 2, 0] = -1.0
        return viol, jac

    def penalty(self, derivs: NDArray[np.float64], shift: float = 0.0, with_yaw: bool = False):
        viol, _ = self(derivs, False)
        e = np.maximum(viol + shift, 0.0)
        grad = np.zeros(derivs.shape)
        grad[:, 2, 0] = 3.0 * (e[:, 0] ** 2 - e[:, 1] ** 2)
        return viol, grad


# --------------------------------------------------------------------------
# Problem and solution types.


@dataclass(frozen=True)
class Waypoint:
    position: tuple[float, float, float]
    tolerance: float = 0.0
    yaw: float | None = None

    def __post_init__(self) -> None:
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ValueError("waypoint position must be three finite numbers")
        if not self.tolerance >= 0:
            raise ValueError("waypoint tolerance must be non-negative")
        object.__setattr__(self, "position", pos)


def _rows(stack, s: int, ch: int = 4) -> NDArray[np.float64]:
    d = stack.derivs if isinstance(stack, DerivativeStack) else np.asarray(stack, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    out = np.zeros((s, ch))
    n = min(s, d.shape[0])
    out[:n] = d[:n, :ch]
    if not np.all(np.isfinite(out)):
        raise ValueError("boundary stack must be finite")
    return out


@dataclass(frozen=True)
class PlanProblem:
    """Two-state or waypoint minimum-time task.

    ``start_stack``/``end_stack`` hold derivatives ``0..s-1`` of
    ``(px, py, pz, psi)``; missing rows are zero.
    """

    model: str
    params: QuadrotorParams
    start_stack: NDArray[np.float64]
    end_stack: NDArray[np.float64]
    waypoints: tuple[Waypoint, ...] = ()
    pieces_per_segment: int | str = "auto"
    n_se: int = 2

    def __post_init__(self) -> None:
        if self.model not in ("S", "R"):
            raise ValueError("model must be 'S' or 'R'")
        if self.n_se not in (0, 1, 2):
            raise ValueError("n_se must be 0, 1 or 2")
        pps = self.pieces_per_segment
        if pps != "auto" and (not isinstance(pps, (int, np.integer)) or pps < 1):
            raise ValueError("pieces_per_segment must be a positive int or 'auto'")
        s = self.s
        object.__setattr__(self, "start_stack", _rows(self.start_stack, s))
        object.__setattr__(self, "end_stack", _rows(self.end_stack, s))
        object.__setattr__(self, "waypoints", tuple(self.waypoints))

    @property
    def s(self) -> int:
        return 3 if self.model == "S" else 4

    def segment_pieces(self) -> int:
        if self.pieces_per_segment == "auto":
            return piece_count(0, 2, self.n_se)
        return int(self.pieces_per_segment)


@dataclass(frozen=True)
class Solution:
    trajectory: PiecewiseTrajectory
    total_time: float
    piece_times: tuple[float, ...]
    converged: bool
    iterations: int
    max_violation: float
    objective_history: tuple[float, ...]
    stage_starts: tuple[int, ...] = ()
    pieces: int = 0
    attempts: tuple[int, ...] = ()
    wall_time: float = 0.0
    waypoint_misses: tuple[float, ...] = ()
    optimizer_success: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "total_time": self.total_time,
            "piece_times": list(self.piece_times),
            "pieces": self.pieces,
            "converged": self.converged,
            "iterations": self.iterations,
            "max_violation": self.max_violation,
            "objective_history": list(self.objective_history),
            "stage_starts": list(self.stage_starts),
            "attempts": list(self.attempts),
            "wall_time": self.wall_time,
            "waypoint_misses": list(self.waypoint_misses),
            "optimizer_success": self.optimizer_success,
            "message": self.message,
        }


# --------------------------------------------------------------------------
# Transcription.

# Balls are optimised with a slightly smaller radius so that the finite
# penalty weight still leaves the junction inside the true ball.
BALL_SHRINK = 0.01


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-300))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@numba.njit(cache=True)
def _node_values(Z, T, W):
    """Derivatives ``D[k, q, r, c]`` at the normalised nodes of every piece."""
    K = T.shape[0]
    Q, R1, J = W.shape
    s = J // 2
    ch = Z.shape[2]
    D = np.empty((K, Q, R1, ch))
    b = np.empty((J, ch))
    for k in range(K):
        Tk = T[k]
        for j in range(J):
            pw = Tk ** (j % s)
            for c in range(ch):
                b[j, c] = (Z[k, j, c] if j < s else Z[k + 1, j - s, c]) * pw
        for q in range(Q):
            for r in range(R1):
                inv = Tk ** (-r)
                for c in range(ch):
                    acc = 0.0
                    for j in range(J):
                        acc += W[q, r, j] * b[j, c]
                    D[k, q, r, c] = acc * inv
    return D


@numba.njit(cache=True)
def _penalty_gradient(viol, node_grad, D, Z, T, W, weight):
    """Per-piece penalty sums and the gradient w.r.t. the stacks and durations.

    ``node_grad[n]`` is the gradient of node ``n``'s penalty w.r.t. its
    derivative stack.
    """
    K, Q, m = viol.shape
    R1 = W.shape[1]
    J = W.shape[2]
    s = J // 2
    ch = Z.shape[2]
    pen = np.zeros(K)
    gZ = np.zeros(Z.shape)
    gT = np.empty(K)
    G = np.zeros((Q, R1, ch))
    gBh = np.zeros((J, ch))
    for k in range(K):
        Tk = T[k]
        fac = weight * Tk / Q
        active = False
        for q in range(Q):
            n = k * Q + q
            for i in range(m):
                v = viol[k, q, i]
                if v > 0.0:
                    active = True
                    pen[k] += v * v * v
            for r in range(R1):
                for c in range(ch):
                    G[q, r, c] = fac * node_grad[n, r, c]
        dT = 0.0
        if active:
            gBh[:] = 0.0
            for q in range(Q):
                for r in range(R1):
                    inv = Tk ** (-r)
                    for c in range(ch):
                        g = G[q, r, c]
                        if g == 0.0:
                            continue
                        dT -= r * g * D[k, q, r, c] / Tk
                        gi = g * inv
                        for j in range(J):
                            gBh[j, c] += gi * W[q, r, j]
            for j in range(J):
                rj = j % s
                pw = Tk**rj
                dpw = rj * Tk ** (rj - 1) if rj > 0 else 0.0
                for c in range(ch):
                    if j < s:
                        dT += gBh[j, c] * dpw * Z[k, j, c]
                        gZ[k, j, c] += gBh[j, c] * pw
                    else:
                        dT += gBh[j, c] * dpw * Z[k + 1, j - s, c]
                        gZ[k + 1, j - s, c] += gBh[j, c] * pw
        gT[k] = 1.0 + weight * pen[k] / Q + dT
    return pen, gZ, gT


class Transcription:
    """Penalised minimum-time NLP over junction stacks and piece durations.

    ``template`` has shape ``(K+1, s, ch)``: the start stack, ``K-1`` junction
    stacks and the end stack.  Entries flagged in ``free`` are decision
    variables, stored divided by ``scale``.  ``tighten`` shifts every
    constraint inward during optimisation; audits always use the true bounds.
    """

    def __init__(self, constraint, template: NDArray[np.float64], free: NDArray[np.bool_],
                 scale: NDArray[np.float64], options: SolverOptions = SolverOptions(),
                 balls: list[tuple[int, NDArray[np.float64], float]] | None = None,
                 checkpoints: list[tuple[int, NDArray[np.float64], float]] | None = None,
                 t_ref: float | None = None):
        self.con = constraint
        self.s = constraint.s
        self.ch = constraint.channels
        self.template = np.array(template, dtype=float)
        self.free = np.asarray(free, dtype=bool)
        self.scale = np.asarray(scale, dtype=float)
        self.K = self.template.shape[0] - 1
        self.opt = options
        self.tighten = float(options.margin)
        self.balls = balls or []
        # every waypoint (hard or soft) for miss reporting
        self.checkpoints = checkpoints if checkpoints is not None else list(self.balls)
        # Free entries of order r are stored relative to (t_ref / total_time)**r,
        # so stretching all durations uniformly leaves the stored values fixed.
        self.t_ref = t_ref
        self.order = np.broadcast_to(np.arange(self.s)[None, :, None], self.template.shape)[self.free].astype(float)
        self.set_nodes(options.nodes)
        dense = options.nodes * options.audit_factor
        self.W_dense = np.ascontiguousarray(node_weights(self.s, np.linspace(0.0, 1.0, dense), self.s))
        self.n_free = int(self.free.sum())
        self.yaw_free = self.ch == 4 and bool(self.free[..., 3].any())
        self.n_evals = 0

    def set_nodes(self, Q: int) -> None:
        """Use ``Q`` evenly spaced penalty nodes per piece, ends included."""
        self.Q = int(Q)
        self.W = np.ascontiguousarray(node_weights(self.s, np.linspace(0.0, 1.0, self.Q), self.s))

    # encoding ------------------------------------------------------------
    def encode(self, stacks: NDArray[np.float64], durations: ArrayLike) -> NDArray[np.float64]:
        stacks = np.asarray(stacks, dtype=float)
        d = np.asarray(durations, dtype=float)
        if np.any(d <= self.opt.t_floor):
            d = np.maximum(d, self.opt.t_floor * (1 + 1e-9) + 1e-12)
        xi = stacks[self.free] / (self.scale[self.free] * self._stretch(d.sum()))
        return np.concatenate([xi, _softplus_inv(d - self.opt.t_floor)])

    def _stretch(self, total: float) -> NDArray[np.float64]:
        if self.t_ref is None:
            return np.ones(self.n_free)
        return (self.t_ref / total) ** self.order

    def decode(self, x: NDArray[np.float64]):
        tau = x[self.n_free :]
        T = self.opt.t_floor + _softplus(tau)
        Z = self.template.copy()
        Z[self.free] = x[: self.n_free] * self.scale[self.free] * self._stretch(T.sum())
        return Z, T

    def trajectory(self, x: NDArray[np.float64]) -> PiecewiseTrajectory:
        Z, T = self.decode(x)
        return PiecewiseTrajectory([piece_from_boundary(Z[k], Z[k + 1], T[k], t_floor=0.0) for k in range(self.K)])

    # evaluation ----------------------------------------------------------
    def objective(self, x: NDArray[np.float64], weight: float, grad: bool = True):
        """Penalised cost and (optionally) its gradient w.r.t. ``x``."""
        self.n_evals += 1
        Z, T = self.decode(x)
        K, Q = self.K, self.Q
        D = _node_values(Z, T, self.W)
        flat = D.reshape(K * Q, self.s + 1, self.ch)
        if grad:
            viol, node_grad = self.con.penalty(flat, self.tighten, self.yaw_free)
        else:
            viol, _ = self.con(flat, False)
        if self.tighten:
            viol = viol + self.tighten
        viol = viol.reshape(K, Q, -1)
        if grad:
            pen, gZ, gT = _penalty_gradient(viol, node_grad, D, Z, T, self.W, float(weight))
        else:
            pen = (np.maximum(viol, 0.0) ** 3).sum(axis=(1, 2))
        cost = float(T.sum() + weight * np.dot(T, pen) / Q)
        for idx, center, radius in self.balls:
            diff = Z[idx, 0, :3] - center
            dist = float(np.linalg.norm(diff))
            excess = dist - (1.0 - BALL_SHRINK) * radius
            if excess > 0:
                cost += weight * excess**2
                if grad:
                    gZ[idx, 0, :3] += 2 * weight * excess * diff / max(dist, 1e-300)
        if not grad:
            return cost
        tau = x[self.n_free :]
        g_free = gZ[self.free]
        if self.t_ref is not None:
            gT = gT + np.dot(g_free, Z[self.free] * (-self.order / T.sum()))
        gx = np.concatenate([g_free * self.scale[self.free] * self._stretch(T.sum()), gT * _sigmoid(tau)])
        return cost, gx

    def max_violation(self, x: NDArray[np.float64], dense: bool = True) -> float:
        """Largest violation of the true (untightened) constraints."""
        Z, T = self.decode(x)
        D = _node_values(Z, T, self.W_dense if dense else self.W)
        viol, _ = self.con(D.reshape(-1, self.s + 1, self.ch), False)
        return float(max(0.0, viol.max()))

    def waypoint_misses(self, x: NDArray[np.float64]) -> list[float]:
        Z, _ = self.decode(x)
        return [float(np.linalg.norm(Z[idx, 0, :3] - c)) for idx, c, _ in self.checkpoints]


def objective_and_gradient(tr: Transcription, x: ArrayLike, weight: float):
    return tr.objective(np.asarray(x, dtype=float), weight, True)


# --------------------------------------------------------------------------
# Optimisation driver.


@dataclass
class DescentResult:
    x: NDArray[np.float64]
    fun: float
    nit: int
    nfev: int
    history: list[float]
    message: str
    success: bool


@numba.njit(cache=True)
def _two_loop(g, S, Y, rho, head, count):
    """Apply the inverse-Hessian estimate stored in the ring buffers to ``g``."""
    m = S.shape[0]
    q = g.copy()
    alpha = np.empty(m)
    for t in range(count):
        i = (head - 1 - t) % m
        a = rho[i] * np.dot(S[i], q)
        alpha[i] = a
        q -= a * Y[i]
    if count:
        i = (head - 1) % m
        q *= np.dot(S[i], Y[i]) / np.dot(Y[i], Y[i])
    else:
        q /= max(1.0, np.sqrt(np.dot(g, g)))
    for t in range(count):
        i = (head - count + t) % m
        b = rho[i] * np.dot(Y[i], q)
        q += S[i] * (alpha[i] - b)
    return q


def lbfgs(fun, x0: ArrayLike, *, memory: int = 16, max_iter: int = 3000, gtol: float = 1e-5,
          past: int = 10, delta: float = 1e-4, max_backtracks: int = 60) -> DescentResult:
    """Limited-memory BFGS with Armijo backtracking on ``fun(x) -> (f, g)``.

    Stops when ``max|g| <= gtol`` or when the cost decreased by less than
    ``delta`` (relative) over the last ``past`` iterations.  Every accepted
    step lowers the cost, so ``history`` is non-increasing.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    f, g = fun(x)
    nfev = 1
    S = np.zeros((memory, n))
    Y = np.zeros((memory, n))
    rho = np.zeros(memory)
    head = count = 0
    history = [float(f)]
    nit = 0
    while True:
        if not np.all(np.isfinite(g)):
            return DescentResult(x, f, nit, nfev, history, "non-finite gradient", False)
        if np.max(np.abs(g)) <= gtol:
            return DescentResult(x, f, nit, nfev, history, "gradient tolerance reached", True)
        if nit >= max_iter:
            return DescentResult(x, f, nit, nfev, history, "iteration limit reached", False)
        d = -_two_loop(g, S, Y, rho, head, count)
        slope = float(g.dot(d))
        if not slope < 0:
            count = 0
            d = -g / max(1.0, float(np.linalg.norm(g)))
            slope = float(g.dot(d))
        t = 1.0
        accepted = False
        for _ in range(max_backtracks):
            xn = x + t * d
            fn, gn = fun(xn)
            nfev += 1
            if np.isfinite(fn) and fn <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if count:
                count = 0
                continue
            return DescentResult(x, f, nit, nfev, history, "no descent along the steepest direction", True)
        s = xn - x
        y = gn - g
        sy = float(s.dot(y))
        if sy > 1e-12 * math.sqrt(float(s.dot(s)) * float(y.dot(y))):
            S[head] = s
            Y[head] = y
            rho[head] = 1.0 / sy
            head = (head + 1) % memory
            count = min(count + 1, memory)
        x, f, g = xn, fn, gn
        nit += 1
        history.append(float(f))
        if past and nit >= past and (history[-1 - past] - f) <= delta * max(abs(f), 1.0):
            return DescentResult(x, f, nit, nfev, history, "relative decrease below tolerance", True)


def _hover_slack(con) -> float:
    """Distance of a hovering (or resting) node from the nearest bound."""
    full = np.zeros((1, con.s + 1, con.channels))
    viol, _ = con(full, False)
    return float(-viol.max())


def _optimize(tr: Transcription, x0: NDArray[np.float64], audit: bool = True):
    """Penalty continuation, then audit-driven tightening of the bounds.

    With ``audit=False`` (warm starts) the continuation stops after the
    nominal schedule whatever the dense violation.
    """
    opt = tr.opt
    x = x0.copy()
    history: list[float] = []
    stage_starts: list[int] = []
    iterations = 0
    success = True
    message = ""
    schedule = list(opt.weights)
    slack = _hover_slack(tr.con)
    rounds = 0
    i = 0
    while i < len(schedule):
        w = schedule[i]
        stage_starts.append(len(history))
        f0 = tr.objective(x, w, grad=False)
        res = lbfgs(lambda z: tr.objective(z, w), x, memory=opt.memory, max_iter=opt.max_iter,
                    gtol=opt.gtol_rel * (1.0 + abs(f0)), past=opt.past, delta=opt.delta)
        history.extend(res.history)
        iterations += res.nit
        x = res.x
        if i == len(schedule) - 1:
            success, message = res.success, res.message
            excess = tr.max_violation(x) if audit else 0.0
            if excess > opt.feas_tol and rounds < opt.tighten_rounds:
                rounds += 1
                at_nodes = tr.max_violation(x, dense=False)
                step = opt.tighten_factor * excess
                if excess > 2.0 * at_nodes + opt.feas_tol and 2 * tr.Q - 1 <= opt.max_refine * opt.nodes:
                    # violation hidden between nodes: refine the grid (old nodes are kept)
                    tr.set_nodes(2 * tr.Q - 1)
                    schedule.append(w)
                elif tr.tighten + step <= 0.25 * slack:
                    # shift the bounds inward by the observed excess
                    tr.tighten += step
                    schedule.append(w)
                else:
                    # the penalty itself is too weak
                    schedule.append(10.0 * w)
        i += 1
    return x, history, stage_starts, iterations, success, message


def _finish(tr: Transcription, x, history, stage_starts, iterations, success, message, t0,
            attempts=()) -> Solution:
    traj = tr.trajectory(x)
    viol = tr.max_violation(x)
    misses = tuple(tr.waypoint_misses(x))
    balls_ok = all(m <= r + 1e-6 for m, (_, _, r) in zip(misses, tr.checkpoints))
    return Solution(
        trajectory=traj,
        total_time=float(traj.durations.sum()),
        piece_times=tuple(float(v) for v in traj.durations),
        converged=bool(success and viol <= tr.opt.feas_tol and balls_ok),
        iterations=iterations,
        max_violation=viol,
        objective_history=tuple(history),
        stage_starts=tuple(stage_starts),
        pieces=tr.K,
        attempts=tuple(attempts),
        wall_time=time.perf_counter() - t0,
        waypoint_misses=misses,
        optimizer_success=bool(success),
        message=message,
    )


# --------------------------------------------------------------------------
# Two-state problems.


def _constraint_for(problem: PlanProblem, options: SolverOptions):
    return QuadConstraints(problem.params, problem.model)


def _seed_duration(params: QuadrotorParams | None, distance: float, floor: float = 1.0) -> float:
    if params is None:
        a_cap = 1.0
    else:
        u_max = 4 * params.rotor_thrust_max / (params.mass * params.gravity)
        a_cap = 0.6 * params.gravity * math.sqrt(max(u_max**2 - 1.0, 1e-6))
    return max(floor, 2.0 * math.sqrt(distance / a_cap))


def _check_boundary(con, stack: NDArray[np.float64], name: str) -> None:
    if isinstance(con, AccelBox):
        return
    full = np.zeros((1, con.s + 1, con.channels))
    full[0, : stack.shape[0]] = stack
    viol, _ = con(full, False)
    excess = float(viol.max())
    if excess > 1e-9:
        raise InfeasibleBoundary(f"{name} stack violates the actuation limits by {excess:.3g}")


def _scales(s: int, ch: int, length: float, t_ref: float, yaw_channel: bool) -> NDArray[np.float64]:
    sc = np.empty((s, ch))
    for r in range(s):
        sc[r, :] = length / t_ref**r
        if yaw_channel:
            sc[r, 3] = 1.0 / t_ref**r
    return sc


def _build_two_state(con, start, end, N, options, length, t_ref, yaw_channel):
    s, ch = con.s, con.channels
    template = np.zeros((N + 1, s, ch))
    template[0] = start
    template[-1] = end
    for k in range(1, N):
        template[k, 0, :] = start[0] + (end[0] - start[0]) * k / N
    free = np.zeros_like(template, dtype=bool)
    free[1:-1] = True
    if yaw_channel:
        free[:, :, 3] = False
    scale = np.broadcast_to(_scales(s, ch, length, t_ref, yaw_channel), template.shape).copy()
    return Transcription(con, template, free, scale, options, t_ref=t_ref * N)


def _split(traj: PiecewiseTrajectory, N: int, s: int):
    """Junction stacks and durations from cutting ``traj`` into ``N`` equal-time pieces."""
    total = traj.total_duration
    ts = total * np.arange(N + 1) / N
    stacks = np.stack([traj.evaluate(t, s - 1) for t in ts])
    return stacks, np.full(N, total / N)


def solve_generic(con, start: ArrayLike, end: ArrayLike, N: int, options: SolverOptions = SolverOptions(),
                  init: PiecewiseTrajectory | None = None, params: QuadrotorParams | None = None,
                  yaw_channel: bool = True) -> Solution:
    """Two-state solve for any constraint model (quadrotor or double integrator)."""
    if N < 1:
        raise ValueError("N must be at least 1")
    t0 = time.perf_counter()
    s, ch = con.s, con.channels
    start = _rows(start, s, ch)
    end = _rows(end, s, ch)
    _check_boundary(con, start, "start")
    _check_boundary(con, end, "end")
    npos = 3 if yaw_channel else ch
    dist = float(np.linalg.norm(end[0, :npos] - start[0, :npos]))
    if init is None and N > 1:
        init = solve_generic(con, start, end, 1, options, None, params, yaw_channel).trajectory
    T_seed = init.total_duration if init is not None else _seed_duration(params, dist)
    length = max(1.0, dist)
    tr = _build_two_state(con, start, end, N, options, length, T_seed / N, yaw_channel)
    if init is not None:
        stacks, durs = _split(init, N, s)
        stacks[0], stacks[-1] = start, end
        if yaw_channel:
            stacks[:, :, 3] = tr.template[:, :, 3]
        x0 = tr.encode(stacks, durs)
    else:
        x0 = tr.encode(tr.template, np.full(N, T_seed / N))
    out = _optimize(tr, x0)
    return _finish(tr, *out, t0, attempts=(N,))


def solve_two_state(problem: PlanProblem, N: int, options: SolverOptions = SolverOptions(),
                    init: PiecewiseTrajectory | None = None) -> Solution:
    con = _constraint_for(problem, options)
    return solve_generic(con, problem.start_stack, problem.end_stack, N, options, init, problem.params)


def robust_aos(problem: PlanProblem, options: SolverOptions = SolverOptions()) -> Solution:
    """Start from the largest piece budget implied by the switch bounds and walk down."""
    t0 = time.perf_counter()
    con = _constraint_for(problem, options)
    seed = solve_generic(con, problem.start_stack, problem.end_stack, 1, options, None, problem.params)
    n_max = piece_count(5, 4, problem.n_se)
    attempts = []
    best = None
    for N in range(n_max, 0, -1):
        attempts.append(N)
        sol = solve_generic(con, problem.start_stack, problem.end_stack, N, options, seed.trajectory, problem.params)
        if best is None or (sol.max_violation, sol.total_time) < (best.max_violation, best.total_time):
            best = sol
        if sol.converged:
            return replace(sol, attempts=tuple(attempts), wall_time=time.perf_counter() - t0)
    raise AllAttemptsFailed(f"no piece count in {attempts} converged", best)


# --------------------------------------------------------------------------
# Waypoint problems.


def _segment_yaws(problem: PlanProblem) -> NDArray[np.float64]:
    """Yaw at every segment boundary; unspecified values interpolate linearly."""
    L = len(problem.waypoints) + 1
    vals = [problem.start_stack[0, 3]] + [w.yaw for w in problem.waypoints] + [problem.end_stack[0, 3]]
    known = [i for i, v in enumerate(vals) if v is not None]
    out = np.interp(np.arange(L + 1), known, [vals[i] for i in known])
    return out


def solve_waypoints(problem: PlanProblem, options: SolverOptions = SolverOptions(),
                    pieces: int | None = None, init: PiecewiseTrajectory | None = None,
                    _audit: bool = True) -> Solution:
    """``L`` segments through the waypoints, each split into ``N`` pieces.

    With more than one piece per segment the solve is warm-started from the
    solve with ``N-1`` pieces per segment unless ``init`` is
    given.  ``init`` may hold any fixed number of pieces per segment; its
    segments are resampled at the new junction times.
    """
    if not problem.waypoints:
        raise ValueError("at least one waypoint is required")
    t0 = time.perf_counter()
    con = _constraint_for(problem, options)
    s, ch = con.s, con.channels
    _check_boundary(con, problem.start_stack, "start")
    _check_boundary(con, problem.end_stack, "end")
    N = pieces or problem.segment_pieces()
    L = len(problem.waypoints) + 1
    if init is None and N > 1:
        # coarse-to-fine chain 1 -> 2 -> ... -> N
        init = solve_waypoints(problem, options, pieces=N - 1, _audit=False).trajectory
    if init is not None and len(init) % L:
        raise ValueError("init must hold the same number of pieces in every segment")
    pts = np.vstack([problem.start_stack[0, :3], [w.position for w in problem.waypoints], problem.end_stack[0, :3]])
    yaws = _segment_yaws(problem)
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    seg_T = np.array([_seed_duration(problem.params, d, floor=0.3) for d in seg_len])
    tb = np.concatenate([[0.0], np.cumsum(seg_T)])

    # Segment-boundary stacks: waypoint positions with central-difference velocities.
    bstacks = np.zeros((L + 1, s, ch))
    bstacks[0] = problem.start_stack
    bstacks[-1] = problem.end_stack
    for i in range(1, L):
        bstacks[i, 0, :3] = pts[i]
        bstacks[i, 1, :3] = (pts[i + 1] - pts[i - 1]) / (tb[i + 1] - tb[i - 1])
        bstacks[i, 0, 3] = yaws[i]

    K = L * N
    template = np.zeros((K + 1, s, ch))
    free = np.zeros_like(template, dtype=bool)
    stacks0 = np.zeros_like(template)
    durs0 = np.zeros(K)
    balls = []
    checkpoints = []
    n0 = len(init) // L if init is not None else 1
    for i in range(L):
        if init is not None:
            seg = PiecewiseTrajectory(init.pieces[i * n0 : (i + 1) * n0])
        else:
            seg = PiecewiseTrajectory([piece_from_boundary(bstacks[i], bstacks[i + 1], seg_T[i], t_floor=0.0)])
        span = seg.total_duration
        for j in range(N + 1):
            k = i * N + j
            if j == N and i < L - 1:
                continue
            stacks0[k] = seg.evaluate(span * j / N, s - 1)
            template[k, 0, 3] = yaws[i] + (yaws[i + 1] - yaws[i]) * j / N
        durs0[i * N : (i + 1) * N] = span / N
    template[0] = problem.start_stack
    template[-1] = problem.end_stack
    free[1:-1, :, :3] = True
    for i, wp in enumerate(problem.waypoints, start=1):
        k = i * N
        center = np.asarray(wp.position)
        checkpoints.append((k, center, wp.tolerance))
        if wp.tolerance == 0.0:
            template[k, 0, :3] = center
            free[k, 0, :3] = False
        else:
            balls.append((k, center, wp.tolerance))
    stacks0[:, :, 3] = template[:, :, 3]
    stacks0[0], stacks0[-1] = problem.start_stack, problem.end_stack
    length = max(1.0, float(seg_len.max()))
    t_ref = max(float(durs0.mean()), 1e-2)
    scale = np.broadcast_to(_scales(s, ch, length, t_ref, True), template.shape).copy()
    tr = Transcription(con, template, free, scale, options, balls, checkpoints, t_ref=float(durs0.sum()))
    x0 = tr.encode(stacks0, durs0)
    out = _optimize(tr, x0, audit=_audit)
    return _finish(tr, *out, t0, attempts=(N,))


# --------------------------------------------------------------------------
# Sampling.


@dataclass(frozen=True)
class SampledTrajectory:
    t: NDArray[np.float64]
    position: NDArray[np.float64]
    attitude: NDArray[np.float64]
    velocity: NDArray[np.float64]
    body_rates: NDArray[np.float64]
    rotors: NDArray[np.float64]
    collective: NDArray[np.float64]

    COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "f1", "f2", "f3", "f4")

    def table(self) -> NDArray[np.float64]:
        return np.column_stack([self.t, self.position, self.attitude, self.velocity, self.body_rates, self.rotors])


def sample_times(total: float, dt: float) -> NDArray[np.float64]:
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(math.floor(total / dt + 1e-9))
    ts = dt * np.arange(n + 1)
    if total - ts[-1] > 1e-9 * max(1.0, total):
        ts = np.append(ts, total)
    else:
        ts[-1] = total
    return ts


def sample_solution(solution: Solution | PiecewiseTrajectory, dt: float, params: QuadrotorParams) -> SampledTrajectory:
    traj = solution.trajectory if isinstance(solution, Solution) else solution
    ts = sample_times(traj.total_duration, dt)
    derivs = traj.evaluate_many(ts, 4)
    pos, att, vel, rates, rotors, coll = [], [], [], [], [], []
    prev_y = None
    for d in derivs:
        m = flatness.flat_maps(d, params, prev_y=prev_y)
        prev_y = m["R"][:, 1]
        st = flatness.state_map(d, params, prev_y=prev_y)
        pos.append(st.position)
        att.append(st.attitude)
        vel.append(st.velocity)
        rates.append(m["omega"])
        rotors.append(m["rotors"])
        coll.append(params.mass * m["collective_acc"])
    return SampledTrajectory(ts, np.array(pos), np.array(att), np.array(vel), np.array(rates), np.array(rotors), np.array(coll))


def hover_problem(model: str, params: QuadrotorParams, position=(0, 0, 0), yaw: float = 0.0) -> PlanProblem:
    s = 3 if model == "S" else 4
    st = np.zeros((s, 4))
    st[0, :3] = position
    st[0, 3] = yaw
    return PlanProblem(model, params, st, st)


def rest_to_rest(model: str, params: QuadrotorParams, start, end, yaw: float = 0.0, **kw) -> PlanProblem:
    s = 3 if model == "S" else 4
    a = np.zeros((s, 4))
    b = np.zeros((s, 4))
    a[0, :3] = start
    b[0, :3] = end
    a[0, 3] = b[0, 3] = yaw
    return PlanProblem(model, params, a, b, **kw)


def tilted_stack(model: str, position, velocity, roll: float, pitch: float, yaw: float = 0.0) -> NDArray[np.float64]:
    """Boundary stack of a vehicle at the given attitude holding hover-size thrust.

    The collective is set to ``g`` so the acceleration is ``g (z_B - e_3)``.
    Jerk and higher rows are zero.
    """
    s = 3 if model == "S" else 4
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    # third column of Rz(yaw) Ry(pitch) Rx(roll)
    zb = np.array([cy * sp * cr + sy * sr, sy * sp * cr - cy * sr, cp * cr])
    out = np.zeros((s, 4))
    out[0, :3] = position
    out[1, :3] = velocity
    out[2, :3] = GRAVITY * (zb - np.array([0.0, 0.0, 1.0]))
    out[0, 3] = yaw
    return out


def random_state_problem(rng: np.random.Generator, params: QuadrotorParams, model: str = "S",
                         end_position=None, max_speed: float = 10.0, max_tilt: float = math.pi / 2) -> PlanProblem:
    """Random two-state task: start at the origin, end at ``end_position``.

    Roll and pitch are uniform in ``(0, max_tilt)`` and the velocity has a
    uniform speed in ``[0, max_speed]`` along a uniformly random direction,
    independently at both ends.  Without ``end_position`` a point of the
    5 m grid of the 20 x 20 x 10 m box around the origin is drawn.
    """
    if end_position is None:
        end_position = (rng.choice([-10, -5, 0, 5, 10]), rng.choice([-10, -5, 0, 5, 10]), rng.choice([-5, 0, 5]))

    def one(pos):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        v = d * rng.uniform(0.0, max_speed)
        return tilted_stack(model, pos, v, rng.uniform(0.0, max_tilt), rng.uniform(0.0, max_tilt))

    start = one((0.0, 0.0, 0.0))
    end = one(np.asarray(end_position, dtype=float))
    return PlanProblem(model, params, start, end)


def warm_up() -> None:
    """Load or compile the jitted kernels so later wall times exclude it."""
    opts = SolverOptions(max_iter=5, weights=(1e2,), tighten_rounds=0)
    for model in ("S", "R"):
        solve_two_state(rest_to_rest(model, _WARM_PARAMS, (0, 0, 0), (1, 0, 0)), 2, opts)
    solve_generic(AccelBox(), [[-2.0], [0.0], [0.0]], [[0.0], [0.0], [0.0]], 2, opts, yaw_channel=False)


_WARM_PARAMS = QuadrotorParams(1.0, 0.15, (5e-3, 5e-3, 1e-2), 0.25, 5.0, 0.01, (10.0, 10.0, 10.0))
