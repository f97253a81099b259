"""Flat-output maps for the 3-D quadrotor.

The flat output is ``(px, py, pz, psi)``.  With ``t = a + g*e3`` and
``c = |t|`` the body frame is::

    z_B = t / c,  x_C = (cos psi, sin psi, 0),  y_B = z_B x x_C / |.|,  x_B = y_B x z_B

Differentiating ``t = c*z_B`` once gives ``c_dot = z_B.j`` and the roll/pitch
rates ``w_x = -y_B.j / c``, ``w_y = x_B.j / c``.  The yaw rate follows from the
constraint ``y_B . x_C = 0``::

    w_z = (w_x * z_B.x_C + psi_dot * y_B.y_C) / (x_B.x_C)

Differentiating once more (using snap and psi_ddot) yields the angular
acceleration, then ``tau = J w_dot + w x J w`` and the rotor thrusts through
the X-layout mixer (rotors FL, FR, RR, RL).

Two independent routes evaluate these maps: :func:`flat_maps` in plain numpy
for user-facing conversions, and a numba kernel used by the optimizer that
also returns Jacobians by complex-step differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

from .model import QuadrotorParams

SINGULAR_FRACTION = 0.05
# Floor on |x_B . x_C|; it vanishes when the thrust axis lines up with the heading.
HEADING_FLOOR = 1e-9
E3 = np.array([0.0, 0.0, 1.0])

# Column layout of the constraint vector for each model.
CONSTRAINT_NAMES = {
    "S": ["wx", "wy", "wz", "rotor_lo", "rotor_hi"],
    "R": ["wx", "wy", "wz"] + [f"f{i}_lo" for i in range(1, 5)] + [f"f{i}_hi" for i in range(1, 5)],
}


class SingularThrust(ValueError):
    """Raised when the thrust direction is undefined and clamping is off."""


@dataclass(frozen=True)
class DerivativeStack:
    """Row ``r`` holds the r-th time derivative of ``(px, py, pz, psi)``."""

    derivs: NDArray[np.float64]

    def __post_init__(self) -> None:
        d = np.array(self.derivs, dtype=float)
        if d.ndim != 2 or d.shape[1] != 4:
            raise ValueError("derivative stack must have four columns")
        if not np.all(np.isfinite(d)):
            raise ValueError("derivative stack must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "derivs", d)

    @property
    def order(self) -> int:
        return self.derivs.shape[0] - 1

    def row(self, r: int) -> NDArray[np.float64]:
        if r < self.derivs.shape[0]:
            return self.derivs[r]
        return np.zeros(4)

    @classmethod
    def hover(cls, position: ArrayLike = (0, 0, 0), yaw: float = 0.0, order: int = 4) -> DerivativeStack:
        d = np.zeros((order + 1, 4))
        d[0, :3] = position
        d[0, 3] = yaw
        return cls(d)


@dataclass(frozen=True)
class FullState:
    position: NDArray[np.float64]
    attitude: NDArray[np.float64]  # unit quaternion (w, x, y, z)
    velocity: NDArray[np.float64]
    body_rates: NDArray[np.float64]

    def __post_init__(self) -> None:
        if abs(np.linalg.norm(self.attitude) - 1.0) > 1e-9:
            raise ValueError("attitude quaternion is not unit norm")

    def rotation(self) -> NDArray[np.float64]:
        w, x, y, z = self.attitude
        return Rotation.from_quat([x, y, z, w]).as_matrix()


@dataclass(frozen=True)
class RotorCommand:
    thrusts: NDArray[np.float64]

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.thrusts)):
            raise ValueError("rotor thrusts must be finite")

    @property
    def collective(self) -> float:
        return float(np.sum(self.thrusts))


def mixer_matrix(params: QuadrotorParams) -> NDArray[np.float64]:
    """Maps rotor thrusts (FL, FR, RR, RL) to ``[F, tau_x, tau_y, tau_z]``."""
    d = params.arm_length / math.sqrt(2.0)
    k = params.torque_constant
    M = np.array(
        [
            [1.0, 1.0, 1.0, 1.0],
            [d, -d, -d, d],
            [-d, -d, d, d],
            [k, -k, k, -k],
        ]
    )
    if not np.isfinite(np.linalg.cond(M)):
        raise ValueError("mixer matrix is singular for these parameters")
    return M


def mixer_inverse(params: QuadrotorParams) -> NDArray[np.float64]:
    return np.linalg.inv(mixer_matrix(params))


def _unit(v: NDArray[np.float64]) -> NDArray[np.float64]:
    return v / np.linalg.norm(v)


def flat_maps(stack: DerivativeStack | ArrayLike, params: QuadrotorParams, clamp: bool = True,
              prev_y: ArrayLike | None = None) -> dict:
    """All intermediate quantities of the flat maps at one instant.

    Requires at least the jerk row; angular acceleration and rotor thrusts are
    returned only when the snap row is present.
    """
    d = stack.derivs if isinstance(stack, DerivativeStack) else np.asarray(stack, dtype=float)
    if d.shape[0] < 4:
        raise ValueError("flat maps need derivatives up to jerk")
    g = params.gravity
    a, j = d[2, :3], d[3, :3]
    psi, dpsi = d[0, 3], d[1, 3]
    ddpsi = d[2, 3]
    t = a + g * E3
    c = float(np.linalg.norm(t))
    eps = SINGULAR_FRACTION * g
    if c < eps and not clamp:
        raise SingularThrust(f"|a + g e3| = {c:.3g} below {eps:.3g}")
    clamped = c < eps
    ch = eps if clamped else c
    z = t / c if c > 0 else E3.copy()
    xc = np.array([math.cos(psi), math.sin(psi), 0.0])
    yc = np.array([-math.sin(psi), math.cos(psi), 0.0])
    u = np.cross(z, xc)
    if np.linalg.norm(u) > 1e-9:
        y = _unit(u)
    elif prev_y is not None:
        y = _unit(np.asarray(prev_y, dtype=float) - np.dot(prev_y, z) * z)
    else:
        y = _unit(yc - np.dot(yc, z) * z)
    x = np.cross(y, z)
    wx = -np.dot(y, j) / ch
    wy = np.dot(x, j) / ch
    zx, yy, den = np.dot(z, xc), np.dot(y, yc), np.dot(x, xc)
    if abs(den) < HEADING_FLOOR:
        den = math.copysign(HEADING_FLOOR, den)
    wz = (wx * zx + dpsi * yy) / den
    out = {
        "R": np.column_stack([x, y, z]),
        "collective_acc": c,
        "omega": np.array([wx, wy, wz]),
    }
    if d.shape[0] < 5:
        return out
    sn = d[4, :3]
    cdot = 0.0 if clamped else np.dot(z, j)
    ydot = -wz * x + wx * z
    xdot = wz * y - wy * z
    zdot = wy * x - wx * y
    dwx = -(np.dot(ydot, j) + np.dot(y, sn)) / ch + np.dot(y, j) * cdot / ch**2
    dwy = (np.dot(xdot, j) + np.dot(x, sn)) / ch - np.dot(x, j) * cdot / ch**2
    num_d = (
        dwx * zx
        + wx * (np.dot(zdot, xc) + dpsi * np.dot(z, yc))
        + ddpsi * yy
        + dpsi * (np.dot(ydot, yc) - dpsi * np.dot(y, xc))
    )
    den_d = np.dot(xdot, xc) + dpsi * np.dot(x, yc)
    dwz = (num_d - wz * den_d) / den
    w = out["omega"]
    dw = np.array([dwx, dwy, dwz])
    J = np.asarray(params.inertia_diag)
    tau = J * dw + np.cross(w, J * w)
    wrench = np.concatenate([[params.mass * c], tau])
    out["omega_dot"] = dw
    out["torque"] = tau
    out["rotors"] = mixer_inverse(params) @ wrench
    return out


def rotation_to_quaternion(R: NDArray[np.float64]) -> NDArray[np.float64]:
    q = Rotation.from_matrix(R).as_quat(scalar_first=True)
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def state_map(stack: DerivativeStack | ArrayLike, params: QuadrotorParams, clamp: bool = True,
              prev_y: ArrayLike | None = None) -> FullState:
    d = stack.derivs if isinstance(stack, DerivativeStack) else np.asarray(stack, dtype=float)
    m = flat_maps(d, params, clamp=clamp, prev_y=prev_y)
    return FullState(d[0, :3].copy(), rotation_to_quaternion(m["R"]), d[1, :3].copy(), m["omega"])


def input_map(stack: DerivativeStack | ArrayLike, params: QuadrotorParams, clamp: bool = True) -> RotorCommand:
    m = flat_maps(stack, params, clamp=clamp)
    if "rotors" not in m:
        raise ValueError("rotor thrusts need the snap row")
    return RotorCommand(m["rotors"])


def rigid_body_derivative(state: FullState, rotors: RotorCommand, params: QuadrotorParams) -> dict:
    """Time derivatives of the full rigid-body state driven by rotor thrusts."""
    wrench = mixer_matrix(params) @ rotors.thrusts
    R = state.rotation()
    J = np.asarray(params.inertia_diag)
    w = state.body_rates
    qw, qx, qy, qz = state.attitude
    # q_dot = 0.5 * q (x) (0, w)
    Omega = np.array(
        [
            [-qx, -qy, -qz],
            [qw, -qz, qy],
            [qz, qw, -qx],
            [-qy, qx, qw],
        ]
    )
    return {
        "position": state.velocity.copy(),
        "velocity": R[:, 2] * wrench[0] / params.mass - params.gravity * E3,
        "attitude": 0.5 * Omega @ w,
        "body_rates": (wrench[1:] - np.cross(w, J * w)) / J,
    }


# --------------------------------------------------------------------------
# Optimizer kernel: constraint values and complex-step Jacobians.


def kernel_params(params: QuadrotorParams) -> NDArray[np.float64]:
    """Packs parameters for :func:`constraint_batch`."""
    return np.concatenate(
        [
            [params.gravity, params.mass, SINGULAR_FRACTION * params.gravity],
            params.inertia_diag,
            params.body_rate_max,
            [params.rotor_thrust_min, params.rotor_thrust_max],
            mixer_inverse(params).ravel(),
        ]
    )


@numba.njit(cache=True)
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@numba.njit(cache=True)
def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


@numba.njit(cache=True)
def _cabs(v):
    return v if v.real >= 0.0 else -v


@numba.njit(cache=True)
def _node_eval(v, p, model_r, out):
    """Constraint vector at one node.

    ``v`` holds a(3), j(3), sn(3), psi, psi_dot, psi_ddot.  It may be real or
    complex; every operation keeps the input type so the same code serves the
    plain evaluation and the complex-step directions.
    """
    g = p[0]
    m = p[1]
    eps = p[2]
    t = (v[0], v[1], v[2] + g)
    c = np.sqrt(_dot(t, t))
    clamped = c.real < eps
    zero = 0.0 * c
    ch = eps + zero if clamped else c
    if c.real > 0.0:
        z = (t[0] / c, t[1] / c, t[2] / c)
    else:
        z = (zero, zero, 1.0 + zero)
    psi = v[9]
    dpsi = v[10]
    xc = (np.cos(psi), np.sin(psi), zero)
    yc = (-np.sin(psi), np.cos(psi), zero)
    u = _cross(z, xc)
    nu = np.sqrt(_dot(u, u))
    if nu.real < 1e-12:
        w_ = _dot(yc, z)
        u = (yc[0] - w_ * z[0], yc[1] - w_ * z[1], yc[2] - w_ * z[2])
        nu = np.sqrt(_dot(u, u))
    y = (u[0] / nu, u[1] / nu, u[2] / nu)
    x = _cross(y, z)
    j = (v[3], v[4], v[5])
    wx = -_dot(y, j) / ch
    wy = _dot(x, j) / ch
    zx = _dot(z, xc)
    yy = _dot(y, yc)
    den = _dot(x, xc)
    if abs(den.real) < HEADING_FLOOR:
        den = zero + (HEADING_FLOOR if den.real >= 0.0 else -HEADING_FLOOR)
    wz = (wx * zx + dpsi * yy) / den
    out[0] = _cabs(wx) - p[6]
    out[1] = _cabs(wy) - p[7]
    out[2] = _cabs(wz) - p[8]
    f_lo = p[9]
    f_hi = p[10]
    if not model_r:
        f = m * c / 4.0
        out[3] = f_lo - f
        out[4] = f - f_hi
        return
    sn = (v[6], v[7], v[8])
    ddpsi = v[11]
    cdot = zero if clamped else _dot(z, j)
    ydot = (-wz * x[0] + wx * z[0], -wz * x[1] + wx * z[1], -wz * x[2] + wx * z[2])
    xdot = (wz * y[0] - wy * z[0], wz * y[1] - wy * z[1], wz * y[2] - wy * z[2])
    zdot = (wy * x[0] - wx * y[0], wy * x[1] - wx * y[1], wy * x[2] - wx * y[2])
    dwx = -(_dot(ydot, j) + _dot(y, sn)) / ch + _dot(y, j) * cdot / (ch * ch)
    dwy = (_dot(xdot, j) + _dot(x, sn)) / ch - _dot(x, j) * cdot / (ch * ch)
    num_d = (
        dwx * zx
        + wx * (_dot(zdot, xc) + dpsi * _dot(z, yc))
        + ddpsi * yy
        + dpsi * (_dot(ydot, yc) - dpsi * _dot(y, xc))
    )
    den_d = _dot(xdot, xc) + dpsi * _dot(x, yc)
    dwz = (num_d - wz * den_d) / den
    Jx = p[3]
    Jy = p[4]
    Jz = p[5]
    tx = Jx * dwx + (wy * Jz * wz - wz * Jy * wy)
    ty = Jy * dwy + (wz * Jx * wx - wx * Jz * wz)
    tz = Jz * dwz + (wx * Jy * wy - wy * Jx * wx)
    wrench = (m * c, tx, ty, tz)
    for i in range(4):
        fi = zero
        for k in range(4):
            fi += p[11 + 4 * i + k] * wrench[k]
        out[3 + i] = f_lo - fi
        out[7 + i] = fi - f_hi


# (row, column) of each kernel direction inside a derivative stack.
_DIR_ROW = np.array([2, 2, 2, 3, 3, 3, 4, 4, 4, 0, 1, 2])
_DIR_COL = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 3, 3, 3])
_DIR_ALL = np.ones(12, dtype=np.bool_)
_DIR_NO_YAW = _DIR_COL != 3


@numba.njit(cache=True)
def _constraint_batch(derivs, p, model_r, want_jac, dir_row, dir_col, active_floor, dir_used):
    n = derivs.shape[0]
    rows = derivs.shape[1]
    mcount = 11 if model_r else 5
    ndir = 12 if model_r else 11
    viol = np.empty((n, mcount))
    jac = np.zeros((n, mcount, rows, 4)) if want_jac else np.zeros((1, 1, 1, 1))
    vr = np.zeros(12)
    v = np.zeros(12, dtype=np.complex128)
    out = np.zeros(mcount, dtype=np.complex128)
    h = 1e-30
    for q in range(n):
        for k in range(12):
            r = dir_row[k]
            vr[k] = derivs[q, r, dir_col[k]] if r < rows else 0.0
        _node_eval(vr, p, model_r, viol[q])
        if not want_jac:
            continue
        worst = viol[q, 0]
        for i in range(1, mcount):
            worst = max(worst, viol[q, i])
        if worst <= active_floor:
            continue
        for k in range(12):
            v[k] = vr[k]
        for k in range(ndir):
            if not dir_used[k] or (not model_r and 6 <= k <= 8):
                continue  # unused direction, or snap in the simplified model
            r = dir_row[k]
            if r >= rows:
                continue
            base = v[k]
            v[k] = base + 1j * h
            _node_eval(v, p, model_r, out)
            v[k] = base
            for i in range(mcount):
                jac[q, i, r, dir_col[k]] = out[i].imag / h
    return viol, jac


@numba.njit(cache=True)
def _axpy(a, x, y):
    return (a * x[0] + y[0], a * x[1] + y[1], a * x[2] + y[2])


@numba.njit(cache=True)
def _sgn(v):
    return 1.0 if v >= 0.0 else -1.0


@numba.njit(cache=True)
def _node_vjp(v, p, model_r, wbar, grad):
    """Reverse-mode product ``wbar @ d(constraints)/d(a, j, sn)`` at one node.

    Yaw and its derivatives are held fixed.  ``grad`` receives the nine
    components ordered like the first nine kernel directions.
    """
    g = p[0]
    m = p[1]
    eps = p[2]
    t = (v[0], v[1], v[2] + g)
    c = math.sqrt(_dot(t, t))
    clamped = c < eps
    ch = eps if clamped else c
    z = (t[0] / c, t[1] / c, t[2] / c) if c > 0.0 else (0.0, 0.0, 1.0)
    psi = v[9]
    dpsi = v[10]
    ddpsi = v[11]
    xc = (math.cos(psi), math.sin(psi), 0.0)
    yc = (-math.sin(psi), math.cos(psi), 0.0)
    u = _cross(z, xc)
    nu = math.sqrt(_dot(u, u))
    degenerate = nu < 1e-12
    if degenerate:
        w_ = _dot(yc, z)
        u = (yc[0] - w_ * z[0], yc[1] - w_ * z[1], yc[2] - w_ * z[2])
        nu = math.sqrt(_dot(u, u))
    y = (u[0] / nu, u[1] / nu, u[2] / nu)
    x = _cross(y, z)
    j = (v[3], v[4], v[5])
    sn = (v[6], v[7], v[8])
    wx = -_dot(y, j) / ch
    wy = _dot(x, j) / ch
    zx = _dot(z, xc)
    yy = _dot(y, yc)
    den = _dot(x, xc)
    floored = abs(den) < HEADING_FLOOR
    if floored:
        den = HEADING_FLOOR if den >= 0.0 else -HEADING_FLOOR
    wz = (wx * zx + dpsi * yy) / den

    b_wx = wbar[0] * _sgn(wx)
    b_wy = wbar[1] * _sgn(wy)
    b_wz = wbar[2] * _sgn(wz)
    b_c = 0.0
    b_ch = 0.0
    b_x = (0.0, 0.0, 0.0)
    b_y = (0.0, 0.0, 0.0)
    b_z = (0.0, 0.0, 0.0)
    b_j = (0.0, 0.0, 0.0)
    b_sn = (0.0, 0.0, 0.0)
    b_zx = 0.0
    b_yy = 0.0
    b_den = 0.0
    if not model_r:
        b_c += 0.25 * m * (wbar[4] - wbar[3])
    else:
        cdot = 0.0 if clamped else _dot(z, j)
        ydot = (-wz * x[0] + wx * z[0], -wz * x[1] + wx * z[1], -wz * x[2] + wx * z[2])
        xdot = (wz * y[0] - wy * z[0], wz * y[1] - wy * z[1], wz * y[2] - wy * z[2])
        zdot = (wy * x[0] - wx * y[0], wy * x[1] - wx * y[1], wy * x[2] - wx * y[2])
        qx = _dot(y, j)
        qy = _dot(x, j)
        px = _dot(ydot, j) + _dot(y, sn)
        py = _dot(xdot, j) + _dot(x, sn)
        dwx = -px / ch + qx * cdot / (ch * ch)
        zdx = _dot(zdot, xc)
        zyc = _dot(z, yc)
        num_d = dwx * zx + wx * (zdx + dpsi * zyc) + ddpsi * yy + dpsi * (_dot(ydot, yc) - dpsi * _dot(y, xc))
        den_d = _dot(xdot, xc) + dpsi * _dot(x, yc)
        dwz = (num_d - wz * den_d) / den
        Jx = p[3]
        Jy = p[4]
        Jz = p[5]
        # rotor thrusts -> wrench
        bw = np.zeros(4)
        for i in range(4):
            bf = wbar[7 + i] - wbar[3 + i]
            for k in range(4):
                bw[k] += p[11 + 4 * i + k] * bf
        b_c += m * bw[0]
        b_tx = bw[1]
        b_ty = bw[2]
        b_tz = bw[3]
        b_dwx = Jx * b_tx
        b_dwy = Jy * b_ty
        b_dwz = Jz * b_tz
        b_wy += (Jz - Jy) * wz * b_tx + (Jy - Jx) * wx * b_tz
        b_wz += (Jz - Jy) * wy * b_tx + (Jx - Jz) * wx * b_ty
        b_wx += (Jx - Jz) * wz * b_ty + (Jy - Jx) * wy * b_tz
        # dwz
        b_num = b_dwz / den
        b_wz += -den_d / den * b_dwz
        b_dend = -wz / den * b_dwz
        b_den += -dwz / den * b_dwz
        # num_d
        b_dwx += zx * b_num
        b_zx += dwx * b_num
        b_wx += (zdx + dpsi * zyc) * b_num
        b_zdot = (wx * b_num * xc[0], wx * b_num * xc[1], wx * b_num * xc[2])
        b_z = _axpy(wx * dpsi * b_num, yc, b_z)
        b_yy += ddpsi * b_num
        b_ydot = (dpsi * b_num * yc[0], dpsi * b_num * yc[1], dpsi * b_num * yc[2])
        b_y = _axpy(-dpsi * dpsi * b_num, xc, b_y)
        # den_d
        b_xdot = (xc[0] * b_dend, xc[1] * b_dend, xc[2] * b_dend)
        b_x = _axpy(dpsi * b_dend, yc, b_x)
        # dwy
        s = b_dwy / ch
        b_xdot = _axpy(s, j, b_xdot)
        b_j = _axpy(s, xdot, b_j)
        b_x = _axpy(s, sn, b_x)
        b_sn = _axpy(s, x, b_sn)
        b_ch += (-py / (ch * ch) + 2.0 * qy * cdot / (ch * ch * ch)) * b_dwy
        k2 = -cdot / (ch * ch) * b_dwy
        b_x = _axpy(k2, j, b_x)
        b_j = _axpy(k2, x, b_j)
        b_cdot = -qy / (ch * ch) * b_dwy
        # dwx
        s = -b_dwx / ch
        b_ydot = _axpy(s, j, b_ydot)
        b_j = _axpy(s, ydot, b_j)
        b_y = _axpy(s, sn, b_y)
        b_sn = _axpy(s, y, b_sn)
        b_ch += (px / (ch * ch) - 2.0 * qx * cdot / (ch * ch * ch)) * b_dwx
        k2 = cdot / (ch * ch) * b_dwx
        b_y = _axpy(k2, j, b_y)
        b_j = _axpy(k2, y, b_j)
        b_cdot += qx / (ch * ch) * b_dwx
        # zdot = wy x - wx y
        b_wy += _dot(x, b_zdot)
        b_x = _axpy(wy, b_zdot, b_x)
        b_wx -= _dot(y, b_zdot)
        b_y = _axpy(-wx, b_zdot, b_y)
        # xdot = wz y - wy z
        b_wz += _dot(y, b_xdot)
        b_y = _axpy(wz, b_xdot, b_y)
        b_wy -= _dot(z, b_xdot)
        b_z = _axpy(-wy, b_xdot, b_z)
        # ydot = -wz x + wx z
        b_wz -= _dot(x, b_ydot)
        b_x = _axpy(-wz, b_ydot, b_x)
        b_wx += _dot(z, b_ydot)
        b_z = _axpy(wx, b_ydot, b_z)
        if not clamped:
            b_z = _axpy(b_cdot, j, b_z)
            b_j = _axpy(b_cdot, z, b_j)
    # wz = (wx zx + dpsi yy) / den
    b_wx += zx / den * b_wz
    b_zx += wx / den * b_wz
    b_yy += dpsi / den * b_wz
    b_den += -wz / den * b_wz
    if not floored:
        b_x = _axpy(b_den, xc, b_x)
    b_y = _axpy(b_yy, yc, b_y)
    b_z = _axpy(b_zx, xc, b_z)
    # wy = x.j / ch, wx = -y.j / ch
    b_x = _axpy(b_wy / ch, j, b_x)
    b_j = _axpy(b_wy / ch, x, b_j)
    b_ch += -wy / ch * b_wy
    b_y = _axpy(-b_wx / ch, j, b_y)
    b_j = _axpy(-b_wx / ch, y, b_j)
    b_ch += -wx / ch * b_wx
    # x = y cross z
    b_y = _axpy(1.0, _cross(z, b_x), b_y)
    b_z = _axpy(1.0, _cross(b_x, y), b_z)
    # y = u / nu
    yb = _dot(b_y, y)
    b_u = ((b_y[0] - yb * y[0]) / nu, (b_y[1] - yb * y[1]) / nu, (b_y[2] - yb * y[2]) / nu)
    if degenerate:
        yz = _dot(yc, z)
        b_z = _axpy(-_dot(b_u, z), yc, b_z)
        b_z = _axpy(-yz, b_u, b_z)
    else:
        b_z = _axpy(1.0, _cross(xc, b_u), b_z)
    if not clamped:
        b_c += b_ch
    b_t = (0.0, 0.0, 0.0)
    if c > 0.0:
        zb = _dot(b_z, z)
        b_t = ((b_z[0] - zb * z[0]) / c, (b_z[1] - zb * z[1]) / c, (b_z[2] - zb * z[2]) / c)
        b_t = _axpy(b_c, z, b_t)
    for k in range(3):
        grad[k] = b_t[k]
        grad[3 + k] = b_j[k]
        grad[6 + k] = b_sn[k]


@numba.njit(cache=True)
def _penalty_batch(derivs, p, model_r, shift, dir_row, dir_col):
    """Values plus the gradient of ``sum_i max(0, h_i + shift)**3`` per node."""
    n = derivs.shape[0]
    rows = derivs.shape[1]
    mcount = 11 if model_r else 5
    viol = np.empty((n, mcount))
    grad = np.zeros((n, rows, 4))
    vr = np.zeros(12)
    wbar = np.zeros(mcount)
    gl = np.zeros(9)
    for q in range(n):
        for k in range(12):
            r = dir_row[k]
            vr[k] = derivs[q, r, dir_col[k]] if r < rows else 0.0
        _node_eval(vr, p, model_r, viol[q])
        active = False
        for i in range(mcount):
            e = viol[q, i] + shift
            if e > 0.0:
                wbar[i] = 3.0 * e * e
                active = True
            else:
                wbar[i] = 0.0
        if not active:
            continue
        _node_vjp(vr, p, model_r, wbar, gl)
        for k in range(9):
            r = dir_row[k]
            if r < rows:
                grad[q, r, dir_col[k]] = gl[k]
    return viol, grad


def constraint_batch(derivs: NDArray[np.float64], kparams: NDArray[np.float64], model: str, jacobian: bool = True,
                     active_floor: float = -math.inf, with_yaw: bool = True):
    """Constraint values ``(n, m)`` and Jacobians ``(n, m, rows, 4)`` for a batch of stacks.

    Jacobian rows are left at zero for nodes whose largest value is at or
    below ``active_floor``; a hinge penalty has no gradient there.  With
    ``with_yaw=False`` the yaw columns are left at zero as well.
    """
    derivs = np.ascontiguousarray(derivs, dtype=float)
    model_r = model == "R"
    need = 5 if model_r else 4
    if derivs.shape[1] < need:
        raise ValueError(f"model {model} needs {need} derivative rows")
    viol, jac = _constraint_batch(derivs, kparams, model_r, jacobian, _DIR_ROW, _DIR_COL, float(active_floor),
                                  _DIR_ALL if with_yaw else _DIR_NO_YAW)
    return (viol, jac) if jacobian else (viol, None)


def penalty_batch(derivs: NDArray[np.float64], kparams: NDArray[np.float64], model: str, shift: float = 0.0):
    """Constraint values ``(n, m)`` and the gradient ``(n, rows, 4)`` of the
    node penalty ``sum_i max(0, h_i + shift)**3`` by a hand-derived reverse pass.

    Yaw columns of the gradient are zero (yaw is treated as fixed).
    """
    derivs = np.ascontiguousarray(derivs, dtype=float)
    model_r = model == "R"
    need = 5 if model_r else 4
    if derivs.shape[1] < need:
        raise ValueError(f"model {model} needs {need} derivative rows")
    return _penalty_batch(derivs, kparams, model_r, float(shift), _DIR_ROW, _DIR_COL)


def constraint_map(stack: DerivativeStack | ArrayLike, params: QuadrotorParams, model: str = "R") -> NDArray[np.float64]:
    """Violation vector; every entry is ``<= 0`` iff the instant is feasible.

    Model R: ``[|w_x|-wb_x, |w_y|-wb_y, |w_z|-wb_z, f_lo-f_1..4, f_1..4-f_hi]``.
    Model S: body rates and the per-rotor share of the collective, ``m*c/4``.
    """
    d = stack.derivs if isinstance(stack, DerivativeStack) else np.asarray(stack, dtype=float)
    viol, _ = constraint_batch(d[None], kernel_params(params), model, jacobian=False)
    return viol[0]


def constraint_jacobian(stack: DerivativeStack | ArrayLike, params: QuadrotorParams, model: str = "R") -> NDArray[np.float64]:
    """``J[i, r, c]`` = d violation_i / d derivs[r, c]."""
    d = stack.derivs if isinstance(stack, DerivativeStack) else np.asarray(stack, dtype=float)
    _, jac = constraint_batch(d[None], kernel_params(params), model, jacobian=True)
    return jac[0]
