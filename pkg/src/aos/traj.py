"""Piecewise-polynomial flat-output trajectories.

Each piece is a degree ``2s-1`` polynomial per channel written in the
normalised local time ``tau = t / T``.  Matching ``s`` derivatives at both ends
fixes it uniquely.  In normalised time the boundary data become
``b_r * T**r``, so the interpolation matrix does not depend on ``T`` and its
inverse is computed once per order.

Evaluating derivative ``r`` at ``tau`` therefore reduces to::

    y_r(t) = T**-r * sum_j W[tau, r, j] * T**r_j * b_j

where ``j`` runs over the ``2s`` boundary entries (start orders then end
orders) and ``r_j`` is the derivative order of entry ``j``.  The solver uses
the same weights for its quadrature nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .flatness import DerivativeStack

T_FLOOR = 1e-3


@lru_cache(maxsize=None)
def hermite_inverse(s: int) -> NDArray[np.float64]:
    """Exact inverse of the confluent Vandermonde matrix on ``tau in {0, 1}``.

    Rows of the forward matrix are the derivatives ``0..s-1`` of the monomials
    at ``tau=0`` followed by the same at ``tau=1``.
    """
    n = 2 * s
    A = [[Fraction(0)] * n for _ in range(n)]
    for r in range(s):
        A[r][r] = Fraction(math.factorial(r))
        for i in range(r, n):
            A[s + r][i] = Fraction(math.factorial(i), math.factorial(i - r))
    # Gauss-Jordan over the rationals.
    M = [row[:] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(A)]
    for col in range(n):
        piv = next(r for r in range(col, n) if M[r][col] != 0)
        M[col], M[piv] = M[piv], M[col]
        p = M[col][col]
        M[col] = [v / p for v in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    inv = np.array([[float(v) for v in row[n:]] for row in M])
    inv.setflags(write=False)
    return inv


def boundary_orders(s: int) -> NDArray[np.int64]:
    """Derivative order of each of the ``2s`` boundary entries."""
    return np.concatenate([np.arange(s), np.arange(s)])


def basis_rows(degree: int, taus: ArrayLike, max_order: int) -> NDArray[np.float64]:
    """``E[q, r, i]`` = r-th derivative of ``tau**i`` at ``taus[q]``."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    n = degree + 1
    E = np.zeros((taus.size, max_order + 1, n))
    for r in range(max_order + 1):
        for i in range(r, n):
            fac = math.factorial(i) // math.factorial(i - r)
            E[:, r, i] = fac * taus ** (i - r)
    return E


def node_weights(s: int, taus: ArrayLike, max_order: int) -> NDArray[np.float64]:
    """``W[q, r, j]``: weight of normalised boundary entry ``j`` in order ``r`` at node ``q``."""
    return basis_rows(2 * s - 1, taus, max_order) @ hermite_inverse(s)


@dataclass(frozen=True)
class PolyPiece:
    """One polynomial piece; ``coeffs[c, i]`` multiplies ``(t/T)**i`` on channel ``c``."""

    coeffs: NDArray[np.float64]
    duration: float

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise ValueError("piece duration must be positive")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("non-finite coefficients")

    @property
    def s(self) -> int:
        return self.coeffs.shape[1] // 2

    @property
    def channels(self) -> int:
        return self.coeffs.shape[0]

    def time_coeffs(self) -> NDArray[np.float64]:
        """Coefficients w.r.t. local time ``t`` (monomial ``t**i``)."""
        i = np.arange(self.coeffs.shape[1])
        return self.coeffs / self.duration**i

    def evaluate(self, t: ArrayLike, max_order: int) -> NDArray[np.float64]:
        """Derivatives ``0..max_order`` at local times ``t``; shape ``(len(t), max_order+1, ch)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        E = basis_rows(self.coeffs.shape[1] - 1, t / self.duration, max_order)
        out = np.einsum("qri,ci->qrc", E, self.coeffs)
        scale = self.duration ** -np.arange(max_order + 1)
        return out * scale[None, :, None]


def piece_from_boundary(start: ArrayLike, end: ArrayLike, duration: float, t_floor: float = T_FLOOR) -> PolyPiece:
    """Unique degree ``2s-1`` piece matching ``s`` derivatives at both ends.

    ``start`` and ``end`` have shape ``(s, ch)``: row ``r`` is the r-th derivative.
    """
    start = _as_rows(start)
    end = _as_rows(end)
    if start.shape != end.shape:
        raise ValueError("start and end stacks differ in shape")
    if not duration > 0 or duration < t_floor:
        raise ValueError(f"duration {duration} below the floor {t_floor}")
    s = start.shape[0]
    powers = float(duration) ** np.arange(s)
    b = np.concatenate([start * powers[:, None], end * powers[:, None]], axis=0)
    coeffs = (hermite_inverse(s) @ b).T
    return PolyPiece(np.ascontiguousarray(coeffs), float(duration))


def _as_rows(stack) -> NDArray[np.float64]:
    if isinstance(stack, DerivativeStack):
        return stack.derivs
    a = np.asarray(stack, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


@dataclass(frozen=True)
class BoundaryGradients:
    """Sensitivities of the time-basis coefficients of one channel.

    ``d_start[i, r]`` = d coeff_i / d start_r, likewise ``d_end``;
    ``d_duration[i, c]`` = d coeff_i / dT for channel ``c``.
    """

    d_start: NDArray[np.float64]
    d_end: NDArray[np.float64]
    d_duration: NDArray[np.float64]


def boundary_gradients(start: ArrayLike, end: ArrayLike, duration: float, basis: str = "time") -> BoundaryGradients:
    """Derivatives of the piece coefficients w.r.t. boundary data and duration.

    ``basis="time"`` differentiates the coefficients of ``t**i``;
    ``basis="normalized"`` those of ``(t/T)**i`` (the stored representation).
    """
    start = _as_rows(start)
    end = _as_rows(end)
    s = start.shape[0]
    T = float(duration)
    inv = hermite_inverse(s)
    rj = boundary_orders(s)
    i = np.arange(2 * s)
    if basis == "time":
        expo = rj[None, :] - i[:, None]
    elif basis == "normalized":
        expo = np.broadcast_to(rj[None, :], (2 * s, 2 * s))
    else:
        raise ValueError(f"unknown basis {basis!r}")
    d_b = inv * T**expo
    b = np.concatenate([start, end], axis=0)
    d_T = (inv * expo * T ** (expo - 1.0)) @ b
    return BoundaryGradients(d_b[:, :s].copy(), d_b[:, s:].copy(), d_T)


class PiecewiseTrajectory:
    """Ordered pieces sharing an order ``s`` and a channel count."""

    def __init__(self, pieces: list[PolyPiece]):
        if not pieces:
            raise ValueError("trajectory needs at least one piece")
        s = pieces[0].s
        ch = pieces[0].channels
        if any(p.s != s or p.channels != ch for p in pieces):
            raise ValueError("pieces differ in order or channel count")
        self.pieces = list(pieces)
        self.s = s
        self.channels = ch
        self.durations = np.array([p.duration for p in pieces])
        self.breaks = np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def total_duration(self) -> float:
        return float(self.breaks[-1])

    def __len__(self) -> int:
        return len(self.pieces)

    def locate(self, t: float) -> tuple[int, float]:
        total = self.total_duration
        if t < -1e-12 or t > total * (1 + 1e-12) + 1e-12:
            raise ValueError(f"t={t} outside [0, {total}]")
        k = int(np.searchsorted(self.breaks, t, side="right") - 1)
        k = min(max(k, 0), len(self.pieces) - 1)
        return k, min(max(t - self.breaks[k], 0.0), self.pieces[k].duration)

    def evaluate(self, t: float, max_order: int | None = None) -> NDArray[np.float64]:
        """Derivatives ``0..max_order`` at global time ``t``; shape ``(max_order+1, ch)``."""
        if max_order is None:
            max_order = self.s
        k, tl = self.locate(t)
        return self.pieces[k].evaluate([tl], max_order)[0]

    def evaluate_many(self, ts: ArrayLike, max_order: int | None = None) -> NDArray[np.float64]:
        if max_order is None:
            max_order = self.s
        ts = np.asarray(ts, dtype=float)
        if ts.size and (ts.min() < -1e-12 or ts.max() > self.total_duration * (1 + 1e-12) + 1e-12):
            raise ValueError("sample times outside the trajectory")
        idx = np.clip(np.searchsorted(self.breaks, ts, side="right") - 1, 0, len(self.pieces) - 1)
        out = np.empty((ts.size, max_order + 1, self.channels))
        for k in np.unique(idx):
            m = idx == k
            tl = np.clip(ts[m] - self.breaks[k], 0.0, self.pieces[k].duration)
            out[m] = self.pieces[k].evaluate(tl, max_order)
        return out

    def stack_at(self, t: float, order: int | None = None) -> DerivativeStack:
        order = self.s if order is None else order
        return DerivativeStack(self.evaluate(t, order))

    def junction_mismatch(self) -> float:
        """Largest relative jump in derivatives ``0..s-1`` across junctions."""
        worst = 0.0
        for a, b in zip(self.pieces[:-1], self.pieces[1:]):
            left = a.evaluate([a.duration], self.s - 1)[0]
            right = b.evaluate([0.0], self.s - 1)[0]
            scale = np.maximum(1.0, np.maximum(abs(left), abs(right)))
            worst = max(worst, float(np.max(abs(left - right) / scale)))
        return worst

    def to_dict(self) -> dict:
        return {
            "s": self.s,
            "basis": "normalized",
            "pieces": [{"T": p.duration, "coeffs": p.coeffs.tolist()} for p in self.pieces],
        }

    @classmethod
    def from_dict(cls, data: dict) -> PiecewiseTrajectory:
        if data.get("basis", "normalized") != "normalized":
            raise ValueError("only normalised-basis coefficients are supported")
        pieces = [PolyPiece(np.asarray(p["coeffs"], dtype=float), float(p["T"])) for p in data["pieces"]]
        traj = cls(pieces)
        if traj.s != int(data["s"]):
            raise ValueError("declared order does not match coefficient count")
        return traj

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> PiecewiseTrajectory:
        return cls.from_dict(json.loads(text))


def trajectory_from_junctions(start: ArrayLike, junctions: ArrayLike, end: ArrayLike, durations: ArrayLike) -> PiecewiseTrajectory:
    """Assemble pieces from ``start``, interior junction stacks and ``end``."""
    start = _as_rows(start)
    end = _as_rows(end)
    junctions = np.asarray(junctions, dtype=float).reshape((-1,) + start.shape)
    stacks = [start, *junctions, end]
    durations = np.asarray(durations, dtype=float)
    if len(durations) != len(stacks) - 1:
        raise ValueError("need one duration per piece")
    return PiecewiseTrajectory(
        [piece_from_boundary(a, b, T, t_floor=0.0) for a, b, T in zip(stacks[:-1], stacks[1:], durations)]
    )
