"""Full nonlinear quadrotor plant and a fixed-step RK4 integrator.

State: position p, velocity v (inertial), unit quaternion q (body -> inertial),
body rates omega. Inputs: collective body-z thrust f_z and body torque tau.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quat

GRAVITY = 9.81


@dataclass
class QuadParams:
    """Physical parameters (defaults from the bundled desk-scale vehicle)."""

    m: float = 0.468
    J: np.ndarray = field(default_factory=lambda: np.array([4.856e-3, 4.856e-3, 8.801e-3]))
    D: np.ndarray = field(default_factory=lambda: np.array([0.25, 0.25, 0.25]))
    f_max: float = 12.0
    tau_max: float | None = None  # optional torque clamp; no bound by default

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=float)
        self.D = np.asarray(self.D, dtype=float)
        if self.m <= 0:
            raise ValueError("mass must be positive")
        if np.any(self.J <= 0):
            raise ValueError("inertia entries must be positive")
        if self.f_max <= self.m * GRAVITY:
            raise ValueError("f_max must exceed hover thrust")

    @property
    def g_vec(self) -> np.ndarray:
        return np.array([0.0, 0.0, -GRAVITY])


@dataclass
class QuadState:
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.q, self.omega])

    @staticmethod
    def from_vector(x: np.ndarray) -> "QuadState":
        return QuadState(x[0:3], x[3:6], x[6:10], x[10:13])

    @staticmethod
    def hover(p=(0.0, 0.0, 0.0)) -> "QuadState":
        return QuadState(np.asarray(p, dtype=float), np.zeros(3),
                         quat.IDENTITY.copy(), np.zeros(3))


@dataclass
class ControlInput:
    f_z: float
    tau: np.ndarray

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=float)


def clamp_input(u: ControlInput, prm: QuadParams, f_min: float = 0.01) -> ControlInput:
    """Enforce 0 < f_z <= f_max (and the optional torque bound)."""
    f_z = min(max(u.f_z, f_min), prm.f_max)
    tau = u.tau
    if prm.tau_max is not None:
        tau = np.clip(tau, -prm.tau_max, prm.tau_max)
    return ControlInput(f_z, tau)


def dynamics_deriv(x: np.ndarray, u: ControlInput, prm: QuadParams) -> np.ndarray:
    """Time derivative of the stacked state vector [p, v, q, omega]."""
    v = x[3:6]
    q = x[6:10]
    omega = x[10:13]
    dp = v
    dv = prm.g_vec + quat.rotmat(q) @ np.array([0.0, 0.0, u.f_z]) / prm.m - prm.D * v
    dq = 0.5 * quat.multiply_raw(q, np.concatenate(([0.0], omega)))
    domega = (u.tau - np.cross(omega, prm.J * omega)) / prm.J
    return np.concatenate([dp, dv, dq, domega])


def integrate_step(s: QuadState, u: ControlInput, prm: QuadParams, dt: float) -> QuadState:
    """One RK4 step with constant input; quaternion renormalized afterwards."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = s.as_vector()
    k1 = dynamics_deriv(x, u, prm)
    k2 = dynamics_deriv(x + 0.5 * dt * k1, u, prm)
    k3 = dynamics_deriv(x + 0.5 * dt * k2, u, prm)
    k4 = dynamics_deriv(x + dt * k3, u, prm)
    x_next = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise FloatingPointError("state blew up during integration")
    x_next[6:10] = quat.normalize(x_next[6:10])
    return QuadState.from_vector(x_next)
