"""Vehicle parameters and the planar non-dimensional quadrotor model.

The planar model has state ``(x, x_dot, z, z_dot, theta)`` and inputs
``(u_r, u_t)``: the pitch rate normalised by the pitch-rate bound and the
collective thrust normalised by ``m*g``.  Time and position are scaled as::

    t_hat = w * t,   pos_hat = w**2 * pos / g

with ``w`` the pitch-axis body-rate bound, which removes mass and gravity from
the equations of motion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

GRAVITY = 9.81


@dataclass(frozen=True)
class QuadrotorParams:
    """Physical description of a quadrotor.

    ``inertia_diag`` is in kg*m^2.  The presets below are ingested from
    g*m^2 values and converted.
    """

    mass: float
    arm_length: float
    inertia_diag: tuple[float, float, float]
    rotor_thrust_min: float
    rotor_thrust_max: float
    torque_constant: float
    body_rate_max: tuple[float, float, float]
    gravity: float = GRAVITY
    name: str = field(default="custom", compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inertia_diag", tuple(float(v) for v in self.inertia_diag))
        object.__setattr__(self, "body_rate_max", tuple(float(v) for v in self.body_rate_max))
        if len(self.inertia_diag) != 3 or len(self.body_rate_max) != 3:
            raise ValueError("inertia_diag and body_rate_max need three components")
        if not self.mass > 0 or not self.arm_length > 0:
            raise ValueError("mass and arm_length must be positive")
        if min(self.inertia_diag) <= 0:
            raise ValueError("inertia components must be positive")
        if not 0 < self.rotor_thrust_min < self.rotor_thrust_max:
            raise ValueError("need 0 < rotor_thrust_min < rotor_thrust_max")
        if min(self.body_rate_max) <= 0 or not self.torque_constant > 0:
            raise ValueError("body-rate bounds and torque constant must be positive")
        if not self.gravity > 0:
            raise ValueError("gravity must be positive")

    @property
    def pitch_rate_max(self) -> float:
        return self.body_rate_max[1]

    @property
    def inertia(self) -> NDArray[np.float64]:
        return np.diag(self.inertia_diag)

    @property
    def collective_bounds(self) -> tuple[float, float]:
        """Mass-normalised collective thrust range in m/s^2."""
        return (4 * self.rotor_thrust_min / self.mass, 4 * self.rotor_thrust_max / self.mass)

    def to_dict(self) -> dict:
        return {
            "mass": self.mass,
            "arm_length": self.arm_length,
            "inertia_diag": list(self.inertia_diag),
            "rotor_thrust_min": self.rotor_thrust_min,
            "rotor_thrust_max": self.rotor_thrust_max,
            "torque_constant": self.torque_constant,
            "body_rate_max": list(self.body_rate_max),
            "gravity": self.gravity,
        }


def _preset(name, m, l, j_gm2, f_lo, f_hi, c_tau, rates) -> QuadrotorParams:
    return QuadrotorParams(
        mass=m,
        arm_length=l,
        inertia_diag=tuple(v * 1e-3 for v in j_gm2),
        rotor_thrust_min=f_lo,
        rotor_thrust_max=f_hi,
        torque_constant=c_tau,
        body_rate_max=rates,
        name=name,
    )


PRESETS: dict[str, QuadrotorParams] = {
    "STD": _preset("STD", 1.0, 0.15, (5.0, 5.0, 10.0), 0.25, 5.0, 0.01, (10, 10, 10)),
    "RPG": _preset("RPG", 0.85, 0.15, (1.0, 1.0, 1.7), 0.1, 6.88, 0.05, (15, 15, 3)),
    "FGG": _preset("FGG", 1.0, 0.08, (4.9, 4.9, 6.9), 0.1, 9.0, 0.136, (10, 10, 3)),
    "FSC": _preset("FSC", 1.005, 0.125, (2.5, 2.1, 4.3), 0.1, 9.0, 0.022, (10, 10, 3)),
}


def preset(name: str) -> QuadrotorParams:
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise KeyError(f"unknown vehicle preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class PlanarState:
    x_hat: float
    x_hat_dot: float
    z_hat: float
    z_hat_dot: float
    theta: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_array()):
            raise ValueError("planar state must be finite")

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.x_hat, self.x_hat_dot, self.z_hat, self.z_hat_dot, self.theta])

    @classmethod
    def from_array(cls, arr: ArrayLike) -> PlanarState:
        a = np.asarray(arr, dtype=float)
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class PlanarInput:
    u_r: float
    u_t: float

    def check(self, u_t_min: float, u_t_max: float, tol: float = 1e-12) -> None:
        if abs(self.u_r) > 1 + tol:
            raise ValueError(f"u_r={self.u_r} outside [-1, 1]")
        if not (u_t_min - tol <= self.u_t <= u_t_max + tol):
            raise ValueError(f"u_t={self.u_t} outside [{u_t_min}, {u_t_max}]")


def nondimensionalize(params: QuadrotorParams, t: ArrayLike, pos: ArrayLike):
    """Return ``(t_hat, pos_hat)`` for dimensional time [s] and position [m]."""
    w = params.pitch_rate_max
    return np.asarray(t) * w, np.asarray(pos) * w**2 / params.gravity


def dimensionalize(params: QuadrotorParams, t_hat: ArrayLike, pos_hat: ArrayLike):
    w = params.pitch_rate_max
    return np.asarray(t_hat) / w, np.asarray(pos_hat) * params.gravity / w**2


def velocity_scale(params: QuadrotorParams) -> float:
    """Dimensional velocity [m/s] corresponding to one non-dimensional unit."""
    return params.gravity / params.pitch_rate_max


def planar_bounds(params: QuadrotorParams) -> tuple[float, float]:
    """Normalised collective-thrust bounds ``(u_t_min, u_t_max)``."""
    mg = params.mass * params.gravity
    return 4 * params.rotor_thrust_min / mg, 4 * params.rotor_thrust_max / mg


def planar_dynamics(state: PlanarState | ArrayLike, inp: PlanarInput | ArrayLike) -> NDArray[np.float64]:
    """Time derivative of the planar state w.r.t. non-dimensional time."""
    s = state.as_array() if isinstance(state, PlanarState) else np.asarray(state, dtype=float)
    if isinstance(inp, PlanarInput):
        u_r, u_t = inp.u_r, inp.u_t
    else:
        u_r, u_t = inp
    theta = s[4]
    return np.array([s[1], u_t * np.sin(theta), s[3], u_t * np.cos(theta) - 1.0, u_r])


def planar_dynamics_dimensional(params: QuadrotorParams, state: ArrayLike, thrust: float, rate: float):
    """Dimensional planar model: ``thrust`` in N, ``rate`` in rad/s."""
    s = np.asarray(state, dtype=float)
    acc = thrust / params.mass
    return np.array(
        [s[1], acc * np.sin(s[4]), s[3], acc * np.cos(s[4]) - params.gravity, rate]
    )


def rk4(f, x0: ArrayLike, t_end: float, dt: float) -> NDArray[np.float64]:
    """Fixed-step RK4 for an autonomous ``f(x)``; the last step is shortened."""
    x = np.asarray(x0, dtype=float).copy()
    t = 0.0
    while t < t_end - 1e-15:
        h = min(dt, t_end - t)
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return x
