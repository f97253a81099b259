"""Maximum-principle machinery for the planar non-dimensional model.

State ``(x, x_dot, z, z_dot, theta)``, inputs ``(u_r, u_t)``.  We use the
Hamiltonian ``H = p.f - 1`` (normal multiplier -1) and maximise it, so along a
time-optimal extremal ``H == 0``.  The adjoint equations give::

    p1 = c1,  p2 = c2 - c1 t,  p3 = c3,  p4 = c4 - c3 t
    p5_dot = -u_t (p2 cos(theta) - p4 sin(theta))

and the switching functions ``Phi_T = p2 sin(theta) + p4 cos(theta)`` (thrust)
and ``Phi_R = p5`` (rate).  A singular flow is an angle trajectory on which
``Phi_R_dot`` vanishes, ``Theta_k = atan2(p2, p4) + k*pi``; along it the rate is
``(c2 c3 - c1 c4) / (p2**2 + p4**2)``.

:func:`shoot_extremal` integrates state and ``p5`` forward under the
maximising control with fixed-step RK4, localising every switching instant by
bisection so that the Hamiltonian is conserved to integrator accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from .model import PlanarState

FLAT_TOL = 1e-12
SINGULAR_TOL = 1e-6
ANGLE_TOL = 1e-4
MAX_SWITCHES = 50

# Arc kinds as stored by the kernel.
BANG_HIGH, SINGULAR, BANG_LOW = 1, 0, -1
_KIND_NAMES = {BANG_HIGH: "bang_high", SINGULAR: "singular", BANG_LOW: "bang_low"}
_CH_THRUST, _CH_RATE = 0, 1


@dataclass(frozen=True)
class AdjointConfig:
    """Adjoint constants ``c`` and the initial ``p5`` (a number or ``"solve"``).

    With ``"solve"``, ``p5(0)`` is chosen so that ``H(0) = 0`` with the rate
    initially at ``rate_sign``.
    """

    c: tuple[float, float, float, float]
    p5_init: float | str = "solve"
    rate_sign: int = 1

    def __post_init__(self) -> None:
        c = tuple(float(v) for v in self.c)
        if len(c) != 4 or not all(math.isfinite(v) for v in c):
            raise ValueError("c must be four finite numbers")
        if not any(c):
            raise ValueError("c must not be the zero vector")
        if self.rate_sign not in (-1, 1):
            raise ValueError("rate_sign must be +1 or -1")
        if isinstance(self.p5_init, str) and self.p5_init != "solve":
            raise ValueError("p5_init must be a number or 'solve'")
        object.__setattr__(self, "c", c)

    @property
    def flat(self) -> bool:
        return is_flat(self.c)


@dataclass(frozen=True)
class AdjointState:
    p1: float
    p2: float
    p3: float
    p4: float
    p5: float


@dataclass(frozen=True)
class SwitchingState:
    phi_t: float
    phi_r: float
    phi_r_dot: float
    hamiltonian: float


def is_flat(c: ArrayLike, tol: float = FLAT_TOL) -> bool:
    c1, c2, c3, c4 = c
    return abs(c2 * c3 - c1 * c4) <= tol


def adjoint_at(cfg: AdjointConfig, t_hat: ArrayLike):
    """``(p1, p2, p3, p4)`` at ``t_hat`` (broadcasts over arrays)."""
    c1, c2, c3, c4 = cfg.c
    t = np.asarray(t_hat, dtype=float)
    ones = np.ones_like(t)
    return c1 * ones, c2 - c1 * t, c3 * ones, c4 - c3 * t


def hamiltonian(cfg: AdjointConfig, t_hat, state, p5, u_t, u_r):
    """``H = p.f - 1`` for the applied controls (broadcasts)."""
    p1, p2, p3, p4 = adjoint_at(cfg, t_hat)
    s = np.asarray(state, dtype=float)
    x_dot, z_dot, theta = s[..., 1], s[..., 3], s[..., 4]
    phi_t = p2 * np.sin(theta) + p4 * np.cos(theta)
    return p1 * x_dot + p3 * z_dot + u_t * phi_t - p4 + p5 * u_r - 1.0


def switching_values(cfg: AdjointConfig, t_hat: float, theta: float, u_t: float,
                     state: PlanarState | ArrayLike | None = None, p5: float | None = None,
                     u_r: float | None = None) -> SwitchingState:
    """Switching quantities at one instant.

    ``phi_r`` is ``p5`` and is only known along a trajectory, so it (and the
    Hamiltonian) are NaN unless ``p5`` and ``state`` are supplied.
    """
    if not u_t > 0:
        raise ValueError("u_t must be positive")
    _, p2, _, p4 = (float(v) for v in adjoint_at(cfg, t_hat))
    phi_t = p2 * math.sin(theta) + p4 * math.cos(theta)
    phi_r_dot = -p2 * u_t * math.cos(theta) + p4 * u_t * math.sin(theta)
    phi_r = float("nan") if p5 is None else float(p5)
    h = float("nan")
    if state is not None and p5 is not None:
        s = state.as_array() if isinstance(state, PlanarState) else np.asarray(state, dtype=float)
        s = s.copy()
        s[4] = theta
        rate = u_r if u_r is not None else (1.0 if p5 >= 0 else -1.0)
        h = float(hamiltonian(cfg, t_hat, s, p5, u_t, rate))
    return SwitchingState(phi_t, phi_r, phi_r_dot, h)


def singular_rate(cfg: AdjointConfig, t_hat: ArrayLike):
    """Rate that keeps ``theta`` on a singular flow."""
    c1, c2, c3, c4 = cfg.c
    t = np.asarray(t_hat, dtype=float)
    den = (c1**2 + c3**2) * t**2 - 2 * (c1 * c2 + c3 * c4) * t + c2**2 + c4**2
    num = c2 * c3 - c1 * c4
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def _flow_reference(c) -> tuple[bool, float]:
    """(is_flat, reference angle) used to build a continuous base flow."""
    c1, c2, c3, c4 = c
    if is_flat(c):
        # (c1, c3) and (c2, c4) are parallel; the longer one fixes the angle best
        if math.hypot(c1, c3) < math.hypot(c2, c4):
            return True, math.atan2(c2, c4)
        return True, math.atan2(c1, c3)
    return False, math.atan2(c2, c4)


@dataclass(frozen=True)
class SingularFlow:
    """``Theta_k(t) = Theta_0(t) + k*pi`` with ``Theta_0`` continuous in ``t``."""

    c: tuple[float, float, float, float]
    k: int
    is_flat: bool
    reference: float

    def theta(self, t_hat: ArrayLike):
        t = np.asarray(t_hat, dtype=float)
        if self.is_flat:
            base = np.full_like(t, self.reference)
        else:
            c1, c2, c3, c4 = self.c
            a = np.arctan2(c2 - c1 * t, c4 - c3 * t)
            d = a - self.reference
            base = self.reference + (d - 2 * np.pi * np.round(d / (2 * np.pi)))
        out = base + self.k * np.pi
        return float(out) if out.ndim == 0 else out

    def residual(self, t_hat: ArrayLike):
        """``-p2 cos(Theta) + p4 sin(Theta)``; zero on the flow."""
        c1, c2, c3, c4 = self.c
        t = np.asarray(t_hat, dtype=float)
        th = self.theta(t)
        return -(c2 - c1 * t) * np.cos(th) + (c4 - c3 * t) * np.sin(th)

    def rate(self, t_hat: ArrayLike):
        if self.is_flat:
            return np.zeros_like(np.asarray(t_hat, dtype=float))
        return singular_rate(AdjointConfig(self.c), t_hat)

    def sample(self, t_hat: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(self.theta(t_hat))

    def undefined_instant(self) -> float | None:
        """Time where ``p2 = p4 = 0`` (flat flows only), else ``None``."""
        c1, c2, c3, c4 = self.c
        if not self.is_flat or (c1 == 0 and c3 == 0):
            return None
        return c2 / c1 if abs(c1) >= abs(c3) else c4 / c3


def singular_flow(cfg: AdjointConfig | ArrayLike, k: int = 0) -> SingularFlow:
    c = cfg.c if isinstance(cfg, AdjointConfig) else tuple(float(v) for v in cfg)
    flat, ref = _flow_reference(c)
    return SingularFlow(tuple(c), int(k), flat, ref)


def solve_p5(cfg: AdjointConfig, x0: PlanarState | ArrayLike, u_t_bounds: tuple[float, float]) -> float:
    """Initial ``p5`` giving ``H(0) = 0`` when the rate starts at ``cfg.rate_sign``."""
    s = x0.as_array() if isinstance(x0, PlanarState) else np.asarray(x0, dtype=float)
    c1, c2, c3, c4 = cfg.c
    phi_t = c2 * math.sin(s[4]) + c4 * math.cos(s[4])
    u_t = u_t_bounds[1] if phi_t >= 0 else u_t_bounds[0]
    rest = c1 * s[1] + c3 * s[3] + u_t * phi_t - c4
    r = 1.0 - rest
    if r < 0:
        raise ValueError("no p5 of the requested sign makes H(0)=0; rescale c")
    return cfg.rate_sign * r


def h_consistent_config(c: ArrayLike, x0: PlanarState | ArrayLike, u_t_bounds: tuple[float, float],
                        rate_sign: int = 1, target: float = 0.5) -> AdjointConfig:
    """Scale ``c`` so that ``H(0) = 0`` is reachable with ``|p5(0)| >= target``."""
    s = x0.as_array() if isinstance(x0, PlanarState) else np.asarray(x0, dtype=float)
    c = np.asarray(c, dtype=float)
    phi_t = c[1] * math.sin(s[4]) + c[3] * math.cos(s[4])
    u_t = u_t_bounds[1] if phi_t >= 0 else u_t_bounds[0]
    rest = c[0] * s[1] + c[2] * s[3] + u_t * phi_t - c[3]
    lam = 1.0 if rest <= 1.0 - target else (1.0 - target) / rest
    cfg = AdjointConfig(tuple(lam * c), "solve", rate_sign)
    return AdjointConfig(cfg.c, solve_p5(cfg, s, u_t_bounds), rate_sign)


def piece_count(n_t: int, n_r: int, n_se: int) -> int:
    """Pieces needed to capture ``n_t`` thrust and ``n_r`` rate switches."""
    for name, v in (("n_t", n_t), ("n_r", n_r), ("n_se", n_se)):
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a non-negative integer")
    if n_se > 2:
        raise ValueError("n_se must be 0, 1 or 2")
    return int(n_t) + int(n_r) + int(n_se) + 1


# --------------------------------------------------------------------------
# Shooting kernel.


@numba.njit(cache=True)
def _base_flow(t, c, flat, ref):
    if flat:
        return ref
    a = math.atan2(c[1] - c[0] * t, c[3] - c[2] * t)
    d = a - ref
    return ref + d - 2.0 * math.pi * round(d / (2.0 * math.pi))


@numba.njit(cache=True)
def _sing_rate(t, c):
    den = (c[0] ** 2 + c[2] ** 2) * t * t - 2.0 * (c[0] * c[1] + c[2] * c[3]) * t + c[1] ** 2 + c[3] ** 2
    if den <= 0.0:
        return 0.0
    return (c[1] * c[2] - c[0] * c[3]) / den


@numba.njit(cache=True)
def _rhs(t, y, ut, ur, singular, kbr, c, flat, ref, out):
    p2 = c[1] - c[0] * t
    p4 = c[3] - c[2] * t
    th = y[4]
    if singular:
        th = _base_flow(t, c, flat, ref) + kbr * math.pi
        ur = 0.0 if flat else _sing_rate(t, c)
    s = math.sin(th)
    co = math.cos(th)
    out[0] = y[1]
    out[1] = ut * s
    out[2] = y[3]
    out[3] = ut * co - 1.0
    out[4] = ur
    out[5] = 0.0 if singular else ut * (p4 * s - p2 * co)


@numba.njit(cache=True)
def _rk4(t, y, h, ut, ur, singular, kbr, c, flat, ref, out, k1, k2, k3, k4, tmp):
    _rhs(t, y, ut, ur, singular, kbr, c, flat, ref, k1)
    for i in range(6):
        tmp[i] = y[i] + 0.5 * h * k1[i]
    _rhs(t + 0.5 * h, tmp, ut, ur, singular, kbr, c, flat, ref, k2)
    for i in range(6):
        tmp[i] = y[i] + 0.5 * h * k2[i]
    _rhs(t + 0.5 * h, tmp, ut, ur, singular, kbr, c, flat, ref, k3)
    for i in range(6):
        tmp[i] = y[i] + h * k3[i]
    _rhs(t + h, tmp, ut, ur, singular, kbr, c, flat, ref, k4)
    for i in range(6):
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    if singular:
        out[4] = _base_flow(t + h, c, flat, ref) + kbr * math.pi
        out[5] = 0.0


@numba.njit(cache=True)
def _phi_t(t, y, c):
    return (c[1] - c[0] * t) * math.sin(y[4]) + (c[3] - c[2] * t) * math.cos(y[4])


@numba.njit(cache=True)
def _flow_gap(t, y, c):
    """p5_dot / u_t; vanishes when theta is on a singular flow."""
    return (c[3] - c[2] * t) * math.sin(y[4]) - (c[1] - c[0] * t) * math.cos(y[4])


@numba.njit(cache=True)
def _angle_to_flow(t, theta, c, flat, ref):
    d = theta - _base_flow(t, c, flat, ref)
    k = round(d / math.pi)
    return abs(d - k * math.pi), k


@numba.njit(cache=True)
def _event_value(which, t, y, c, ut, ur):
    if which == 0:
        return _phi_t(t, y, c)
    if which == 1:
        return y[5]
    if which == 2:
        return _flow_gap(t, y, c)
    return abs(_sing_rate(t, c)) - 1.0


@numba.njit(cache=True)
def _shoot_kernel(c, x0, p5_0, ut_lo, ut_hi, horizon, dt, sing_tol, ang_tol, exit_t, exit_dir,
                  max_switches, stride, flat, ref, rate_sign):
    nmax = int(math.ceil(horizon / dt)) + 4 * max_switches + 16
    cap = nmax // stride + 4 * max_switches + 16
    ts = np.empty(cap)
    ys = np.empty((cap, 6))
    uts = np.empty(cap)
    urs = np.empty(cap)
    modes = np.empty(cap, dtype=np.int64)
    ecap = 8 * max_switches + 16
    ev_t = np.empty(ecap)
    ev_ch = np.empty(ecap, dtype=np.int64)
    ev_kind = np.empty(ecap, dtype=np.int64)

    y = np.empty(6)
    for i in range(5):
        y[i] = x0[i]
    y[5] = p5_0
    y1 = np.empty(6)
    ytry = np.empty(6)
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    tmp = np.empty(6)

    t = 0.0
    phi = _phi_t(t, y, c)
    ut = ut_hi if phi >= 0 else ut_lo
    if p5_0 > 0:
        ur = 1.0
    elif p5_0 < 0:
        ur = -1.0
    else:
        ur = float(rate_sign)
    singular = False
    kbr = 0
    hold = False  # rate held after leaving a singular arc
    armed = True  # singular entry allowed
    dist0, kk = _angle_to_flow(t, y[4], c, flat, ref)
    if abs(p5_0) <= sing_tol and dist0 <= ang_tol:
        singular = True
        kbr = kk
        y[4] = _base_flow(t, c, flat, ref) + kbr * math.pi
        y[5] = 0.0
    n_ev = 0
    ev_t[n_ev] = 0.0
    ev_ch[n_ev] = 0
    ev_kind[n_ev] = BANG_HIGH if ut == ut_hi else BANG_LOW
    n_ev += 1
    ev_t[n_ev] = 0.0
    ev_ch[n_ev] = 1
    ev_kind[n_ev] = SINGULAR if singular else (BANG_HIGH if ur > 0 else BANG_LOW)
    n_ev += 1
    n_rate = 0
    n_thrust = 0
    chattering = False
    exit_done = exit_t < 0.0

    n = 0
    step = 0
    ts[n] = t
    ys[n, :] = y
    uts[n] = ut
    urs[n] = (0.0 if flat else _sing_rate(t, c)) if singular else ur
    modes[n] = 1 if singular else 0
    n += 1

    while t < horizon - 1e-12:
        h = min(dt, horizon - t)
        if singular and not exit_done and exit_t > t and exit_t < t + h:
            h = exit_t - t
        _rk4(t, y, h, ut, ur, singular, kbr, c, flat, ref, y1, k1, k2, k3, k4, tmp)
        # Earliest sign-change event inside (t, t+h].
        best_h = h
        best = -1
        for which in range(4):
            if which == 1 and (singular or hold):
                continue
            if which == 2 and (singular or not armed):
                continue
            if which == 3 and (not singular or flat):
                continue
            v0 = _event_value(which, t, y, c, ut, ur)
            v1 = _event_value(which, t + h, y1, c, ut, ur)
            if which == 2:
                # only interesting when p5 is already tiny
                if min(abs(y[5]), abs(y1[5])) > 1e3 * sing_tol:
                    continue
            if which == 3:
                if v1 <= 0.0 or v0 > 0.0:
                    continue
            elif v0 == 0.0 or v0 * v1 > 0.0:
                continue
            lo = 0.0
            hi = h
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                _rk4(t, y, mid, ut, ur, singular, kbr, c, flat, ref, ytry, k1, k2, k3, k4, tmp)
                vm = _event_value(which, t + mid, ytry, c, ut, ur)
                if which == 3:
                    crossed = vm > 0.0
                else:
                    crossed = vm * v0 <= 0.0
                if crossed:
                    hi = mid
                else:
                    lo = mid
                if hi - lo < 1e-15:
                    break
            if best < 0 or hi < best_h:
                best_h = hi
                best = which
        if best >= 0 and best_h < h:
            _rk4(t, y, best_h, ut, ur, singular, kbr, c, flat, ref, y1, k1, k2, k3, k4, tmp)
        t = t + best_h
        for i in range(6):
            y[i] = y1[i]

        # Control updates at the new point.
        phi = _phi_t(t, y, c)
        if best == 0:
            # the bisection bracket guarantees a sign change; phi may be exactly 0
            new_ut = ut_lo if ut == ut_hi else ut_hi
        else:
            new_ut = ut_hi if phi > 0 else (ut_lo if phi < 0 else ut)
        if new_ut != ut:
            ut = new_ut
            n_thrust += 1
            if n_ev < ecap:
                ev_t[n_ev] = t
                ev_ch[n_ev] = 0
                ev_kind[n_ev] = BANG_HIGH if ut == ut_hi else BANG_LOW
                n_ev += 1
        if singular:
            leave = False
            direction = 1.0
            if not exit_done and abs(t - exit_t) <= 1e-12:
                leave = True
                exit_done = True
                direction = exit_dir
            elif not flat and abs(_sing_rate(t, c)) >= 1.0:
                leave = True
                direction = 1.0 if _sing_rate(t, c) > 0 else -1.0
            if leave:
                singular = False
                hold = True
                armed = False
                ur = direction
                n_rate += 1
                if n_ev < ecap:
                    ev_t[n_ev] = t
                    ev_ch[n_ev] = 1
                    ev_kind[n_ev] = BANG_HIGH if ur > 0 else BANG_LOW
                    n_ev += 1
        else:
            dist, kk = _angle_to_flow(t, y[4], c, flat, ref)
            if hold and abs(y[5]) > sing_tol:
                hold = False
                sgn = 1.0 if y[5] > 0 else -1.0
                if sgn != ur:
                    ur = sgn
                    n_rate += 1
                    if n_ev < ecap:
                        ev_t[n_ev] = t
                        ev_ch[n_ev] = 1
                        ev_kind[n_ev] = BANG_HIGH if ur > 0 else BANG_LOW
                        n_ev += 1
            if not armed and dist > 2.0 * ang_tol:
                armed = True
            enter = armed and abs(y[5]) <= sing_tol and dist <= ang_tol
            if enter and not flat and abs(_sing_rate(t, c)) >= 1.0:
                enter = False
            if enter:
                singular = True
                hold = False
                kbr = kk
                y[4] = _base_flow(t, c, flat, ref) + kbr * math.pi
                y[5] = 0.0
                n_rate += 1
                if n_ev < ecap:
                    ev_t[n_ev] = t
                    ev_ch[n_ev] = 1
                    ev_kind[n_ev] = SINGULAR
                    n_ev += 1
            elif not hold and best == 1:
                ur = -ur
                n_rate += 1
                if n_ev < ecap:
                    ev_t[n_ev] = t
                    ev_ch[n_ev] = 1
                    ev_kind[n_ev] = BANG_HIGH if ur > 0 else BANG_LOW
                    n_ev += 1

        step += 1
        if step % stride == 0 or best >= 0 or t >= horizon - 1e-12:
            if n < cap:
                ts[n] = t
                ys[n, :] = y
                uts[n] = ut
                urs[n] = (0.0 if flat else _sing_rate(t, c)) if singular else ur
                modes[n] = 1 if singular else 0
                n += 1
        if n_rate > max_switches or n_thrust > max_switches:
            chattering = True
            break
        if n_ev >= ecap or n >= cap:
            chattering = True
            break
    return ts[:n], ys[:n], uts[:n], urs[:n], modes[:n], ev_t[:n_ev], ev_ch[:n_ev], ev_kind[:n_ev], chattering, t


# --------------------------------------------------------------------------
# Profiles and classification.


@dataclass(frozen=True)
class Arc:
    kind: str
    channel: str
    t_start: float
    t_end: float

    @property
    def letter(self) -> str:
        return "S" if self.kind == "singular" else "B"


@dataclass(frozen=True)
class SwitchingProfile:
    arcs: tuple[Arc, ...]
    switch_count: dict
    structure: dict
    is_flat: bool
    c13_nonzero: bool
    flow_band: bool
    chattering: bool

    def channel_arcs(self, channel: str) -> list[Arc]:
        return [a for a in self.arcs if a.channel == channel]


def _build_arcs(ev_t, ev_ch, ev_kind, t_end, min_len) -> list[Arc]:
    arcs: list[Arc] = []
    for ch_code, ch_name in ((_CH_THRUST, "thrust"), (_CH_RATE, "rate")):
        idx = np.flatnonzero(ev_ch == ch_code)
        raw = []
        for n, i in enumerate(idx):
            start = float(ev_t[i])
            end = float(ev_t[idx[n + 1]]) if n + 1 < len(idx) else float(t_end)
            raw.append([_KIND_NAMES[int(ev_kind[i])], start, end])
        # Drop slivers shorter than min_len, then fuse equal neighbours.
        kept = []
        for kind, s, e in raw:
            if e - s < min_len and len(raw) > 1:
                if kept:
                    kept[-1][2] = e
                continue
            if kept and kept[-1][0] == kind:
                kept[-1][2] = e
            else:
                if kept:
                    s = kept[-1][2]
                kept.append([kind, s, e])
        if kept:
            kept[0][1] = raw[0][1]
        arcs.extend(Arc(k, ch_name, s, e) for k, s, e in kept)
    return arcs


def within_flow_band(ts: ArrayLike, thetas: ArrayLike, cfg: AdjointConfig) -> bool:
    """Whether some branch ``Theta_c`` keeps ``theta`` within ``[Theta_c - pi, Theta_c + pi]``."""
    base = singular_flow(cfg, 0).theta(np.asarray(ts))
    d = np.asarray(thetas) - base
    lo = (np.max(d) - np.pi) / np.pi
    hi = (np.min(d) + np.pi) / np.pi
    return math.floor(hi + 1e-12) >= lo - 1e-12


@dataclass(frozen=True)
class Extremal:
    t: NDArray[np.float64]
    states: NDArray[np.float64]
    p5: NDArray[np.float64]
    u_t: NDArray[np.float64]
    u_r: NDArray[np.float64]
    singular_mode: NDArray[np.bool_]
    profile: SwitchingProfile
    cfg: AdjointConfig
    p5_init: float
    chattering: bool
    u_t_bounds: tuple[float, float] = field(default=(0.0, 0.0))

    def hamiltonian(self) -> NDArray[np.float64]:
        return hamiltonian(self.cfg, self.t, self.states, self.p5, self.u_t, self.u_r)

    def hamiltonian_drift(self) -> float:
        h = self.hamiltonian()
        return float(np.max(np.abs(h - h[0])))

    def phi_t(self) -> NDArray[np.float64]:
        _, p2, _, p4 = adjoint_at(self.cfg, self.t)
        th = self.states[:, 4]
        return p2 * np.sin(th) + p4 * np.cos(th)


def shoot_extremal(cfg: AdjointConfig, x0: PlanarState | ArrayLike, horizon: float, dt: float,
                   u_t_bounds: tuple[float, float], *, singular_tol: float = SINGULAR_TOL,
                   angle_tol: float = ANGLE_TOL, max_switches: int = MAX_SWITCHES,
                   singular_exit: tuple[float, int] | None = None, record_every: int = 1) -> Extremal:
    """Integrate state and ``p5`` forward under the maximising control.

    ``singular_exit=(t, direction)`` leaves a singular arc at time ``t`` with
    rate ``direction``; otherwise a singular arc ends only when the flow rate
    exceeds the bound.
    """
    if not dt > 0 or not horizon > 0:
        raise ValueError("dt and horizon must be positive")
    lo, hi = u_t_bounds
    if not 0 < lo < hi:
        raise ValueError("need 0 < u_t_min < u_t_max")
    s = x0.as_array() if isinstance(x0, PlanarState) else np.asarray(x0, dtype=float)
    p5_0 = solve_p5(cfg, s, u_t_bounds) if isinstance(cfg.p5_init, str) else float(cfg.p5_init)
    flat, ref = _flow_reference(cfg.c)
    ex_t, ex_dir = (-1.0, 1.0) if singular_exit is None else (float(singular_exit[0]), float(singular_exit[1]))
    out = _shoot_kernel(
        np.asarray(cfg.c), s.astype(float), p5_0, float(lo), float(hi), float(horizon), float(dt),
        float(singular_tol), float(angle_tol), ex_t, ex_dir, int(max_switches), int(record_every),
        flat, ref, int(cfg.rate_sign),
    )
    ts, ys, uts, urs, modes, ev_t, ev_ch, ev_kind, chattering, t_end = out
    arcs = _build_arcs(ev_t, ev_ch, ev_kind, t_end, 10 * dt)
    counts = {ch: max(0, sum(a.channel == ch for a in arcs) - 1) for ch in ("thrust", "rate")}
    structure = {ch: "-".join(a.letter for a in arcs if a.channel == ch) for ch in ("thrust", "rate")}
    c1, _, c3, _ = cfg.c
    profile = SwitchingProfile(
        arcs=tuple(arcs),
        switch_count=counts,
        structure=structure,
        is_flat=flat,
        c13_nonzero=(c1, c3) != (0.0, 0.0),
        flow_band=bool(within_flow_band(ts, ys[:, 4], cfg)),
        chattering=bool(chattering),
    )
    return Extremal(ts, ys[:, :5].copy(), ys[:, 5].copy(), uts, urs, modes.astype(bool), profile, cfg,
                    p5_0, bool(chattering), (float(lo), float(hi)))


@dataclass(frozen=True)
class StructureReport:
    thrust_structure: str
    rate_structure: str
    thrust_switches: int
    rate_switches: int
    singular_arcs: int
    bang_arcs: int
    lemma: str
    lemma_compliant: bool
    theorem_compliant: bool
    flow_band: bool
    opposite_bang_pairs: int
    chattering: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def opposite_bang_pairs(profile: SwitchingProfile) -> int:
    """Consecutive rate bang arcs of opposite sign (a direct bang-bang switch)."""
    rate = profile.channel_arcs("rate")
    return sum(
        1
        for a, b in zip(rate[:-1], rate[1:])
        if a.kind != "singular" and b.kind != "singular" and a.kind != b.kind
    )


def classify_profile(profile: SwitchingProfile) -> StructureReport:
    """Counts arcs and checks them against the structural bounds for the cfg's class."""
    rate = profile.channel_arcs("rate")
    letters = [a.letter for a in rate]
    n_s = letters.count("S")
    n_b = letters.count("B")
    alternating = all(x != y for x, y in zip(letters[:-1], letters[1:]))
    n_thrust = profile.switch_count["thrust"]
    if profile.is_flat:
        lemma = "flat"
        ok = n_thrust <= 5 and n_s <= 2 and n_b <= 3 and alternating
    else:
        lemma = "non-flat"
        ok = n_thrust <= 2 and n_s <= 1 and n_b <= 2 and alternating
    theorem = n_thrust <= 5 and profile.switch_count["rate"] <= 4 and n_s <= 2
    return StructureReport(
        thrust_structure=profile.structure["thrust"],
        rate_structure=profile.structure["rate"],
        thrust_switches=n_thrust,
        rate_switches=profile.switch_count["rate"],
        singular_arcs=n_s,
        bang_arcs=n_b,
        lemma=lemma,
        lemma_compliant=bool(ok),
        theorem_compliant=bool(theorem),
        flow_band=profile.flow_band,
        opposite_bang_pairs=opposite_bang_pairs(profile),
        chattering=profile.chattering,
    )


def profile_from_arcs(rate_kinds: list[str], thrust_kinds: list[str] | None = None, flat: bool = True) -> SwitchingProfile:
    """Builds a unit-spaced profile from arc kinds (handy for reports and tests)."""
    arcs = [Arc(k, "rate", float(i), float(i + 1)) for i, k in enumerate(rate_kinds)]
    thrust_kinds = thrust_kinds or ["bang_high"]
    arcs += [Arc(k, "thrust", float(i), float(i + 1)) for i, k in enumerate(thrust_kinds)]
    counts = {"rate": len(rate_kinds) - 1, "thrust": len(thrust_kinds) - 1}
    structure = {
        "rate": "-".join("S" if k == "singular" else "B" for k in rate_kinds),
        "thrust": "-".join("S" if k == "singular" else "B" for k in thrust_kinds),
    }
    return SwitchingProfile(tuple(arcs), counts, structure, flat, True, True, False)


def random_extremal_setup(rng: np.random.Generator, u_t_bounds: tuple[float, float], flat: bool = False):
    """Random H-consistent ``(cfg, x0)`` with ``(c1, c3) != (0, 0)``."""
    c = rng.normal(size=4)
    if flat:
        mu = rng.normal()
        c[1], c[3] = mu * c[0], mu * c[2]
    x0 = np.array([0.0, rng.normal(), 0.0, rng.normal(), rng.uniform(-math.pi / 2, math.pi / 2)])
    sign = int(rng.choice([-1, 1]))
    return h_consistent_config(c, x0, u_t_bounds, rate_sign=sign), x0
