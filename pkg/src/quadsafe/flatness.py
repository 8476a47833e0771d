"""Differential-flatness conversions between the augmented outer-loop model
and the thrust/attitude commands of the inner loop.

The anchor convention, checked by tests: for any virtual acceleration a_v
inside the thrust cone,

    g_vec + R(q_d) (0, 0, f_z)^T / m == a_v
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat
from .sim import GRAVITY, QuadParams


@dataclass
class FlatOutput:
    """Flat reference: position through snap, yaw through yaw acceleration."""

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    s: np.ndarray
    psi: float = 0.0
    dpsi: float = 0.0
    ddpsi: float = 0.0

    def __post_init__(self):
        for name in ("p", "v", "a", "j", "s"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))


@dataclass
class AugState:
    p: np.ndarray
    v: np.ndarray
    a_v: np.ndarray
    j_v: np.ndarray

    def __post_init__(self):
        for name in ("p", "v", "a_v", "j_v"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.a_v, self.j_v])

    @staticmethod
    def from_vector(z: np.ndarray) -> "AugState":
        z = np.asarray(z, dtype=float)
        return AugState(z[0:3], z[3:6], z[6:9], z[9:12])


@dataclass
class DesiredCommand:
    f_z: float
    q_d: np.ndarray
    omega_d: np.ndarray
    domega_d: np.ndarray


def reference_to_augmented(flat: FlatOutput, D: np.ndarray) -> tuple[AugState, np.ndarray]:
    """Reference augmented state and input whose real-state image is `flat`.

    Inverse of :func:`virtual_to_real`: a_v = a + Dv, j_v = j + Da, s_v = j' + Dj.
    """
    D = np.asarray(D, dtype=float)
    a_v = flat.a + D * flat.v
    j_v = flat.j + D * flat.a
    s_v = flat.s + D * flat.j
    return AugState(flat.p, flat.v, a_v, j_v), s_v


def virtual_to_real(v_d, a_v_d, j_v_d, s_v, D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convert virtual (a_v, j_v, s_v) into real acceleration, jerk, snap."""
    D = np.asarray(D, dtype=float)
    a_d = -D * np.asarray(v_d, float) + np.asarray(a_v_d, float)
    j_d = -D * a_d + np.asarray(j_v_d, float)
    s_d = -D * j_d + np.asarray(s_v, float)
    return a_d, j_d, s_d


def propagate_desired(z_k: AugState, s_star: np.ndarray, A: np.ndarray, B: np.ndarray) -> AugState:
    """One-step desired augmented state z_d = A z_k + B s*."""
    return AugState.from_vector(A @ z_k.as_vector() + B @ np.asarray(s_star, float))


def desired_attitude(a_v_d: np.ndarray, psi_ref: float, prm: QuadParams) -> tuple[float, np.ndarray]:
    """Thrust magnitude and desired attitude realizing a virtual acceleration.

    The tilt (reduced) rotation brings body z onto the thrust direction
    (a_v_d - g_vec) / ||.||; yaw is applied about body z afterwards, so it
    never moves the thrust axis.
    """
    a_v_d = np.asarray(a_v_d, dtype=float)
    thrust_vec = a_v_d - prm.g_vec
    f_z = prm.m * np.linalg.norm(thrust_vec)
    ax, ay = a_v_d[0], a_v_d[1]
    s_xy = np.hypot(ax, ay)
    if s_xy < 1e-12:
        # analytic limit: no tilt when the horizontal demand vanishes
        q_red = quat.IDENTITY.copy()
        if thrust_vec[2] < 0:
            q_red = np.array([0.0, 1.0, 0.0, 0.0])  # inverted demand: pitch over
    else:
        phi_red = np.arctan2(s_xy, a_v_d[2] + GRAVITY)
        n_red = np.array([-ay, ax, 0.0]) / s_xy
        q_red = quat.from_axis_angle(n_red, phi_red)
    q_yaw = np.array([np.cos(-psi_ref / 2.0), 0.0, 0.0, np.sin(-psi_ref / 2.0)])
    q_d = quat.multiply(q_red, q_yaw)
    return f_z, q_d


def desired_rates(a_v_d, j_v_d, s_v_d, psi_ref: float, dpsi_ref: float, ddpsi_ref: float,
                  prm: QuadParams, h: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Desired body rates and accelerations from the closed-form q_d(t).

    q_d depends on (a_v_d, psi); both are propagated locally to second order
    (a_v' = j_v, a_v'' = s_v) and q_d is differentiated by central
    differences with step h, then mapped through omega = 2 vec(q* dq/dt).
    """
    a_v_d = np.asarray(a_v_d, dtype=float)
    j_v_d = np.asarray(j_v_d, dtype=float)
    s_v_d = np.asarray(s_v_d, dtype=float)

    def q_at(sigma: float) -> np.ndarray:
        a = a_v_d + sigma * j_v_d + 0.5 * sigma * sigma * s_v_d
        psi = psi_ref + sigma * dpsi_ref + 0.5 * sigma * sigma * ddpsi_ref
        return desired_attitude(a, psi, prm)[1]

    q0 = q_at(0.0)
    qp = q_at(h)
    qm = q_at(-h)
    # keep all three samples on the same quaternion hemisphere
    if np.dot(qp, q0) < 0:
        qp = -qp
    if np.dot(qm, q0) < 0:
        qm = -qm
    dq = (qp - qm) / (2.0 * h)
    ddq = (qp - 2.0 * q0 + qm) / (h * h)
    omega = 2.0 * quat.multiply_raw(quat.conjugate(q0), dq)[1:]
    domega = 2.0 * (quat.multiply_raw(quat.conjugate(q0), ddq)
                    + quat.multiply_raw(quat.conjugate(dq), dq))[1:]
    return omega, domega


def command_from_augmented(z_d: AugState, s_v: np.ndarray, psi: float, dpsi: float,
                           ddpsi: float, prm: QuadParams) -> DesiredCommand:
    """Full inner-loop command from a desired augmented state and input."""
    f_z, q_d = desired_attitude(z_d.a_v, psi, prm)
    omega_d, domega_d = desired_rates(z_d.a_v, z_d.j_v, s_v, psi, dpsi, ddpsi, prm)
    return DesiredCommand(f_z, q_d, omega_d, domega_d)
