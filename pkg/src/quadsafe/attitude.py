"""Tilt-prioritized inner-loop attitude controller.

The attitude error q_e = q^-1 ⊙ q_d (rotation from the actual body frame to
the desired one) is split into a yaw part about body z and a reduced (tilt)
part; the tilt gain dominates so the thrust direction is recovered first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quat


@dataclass
class AttitudeGains:
    k_p_xy: float = 24.0
    k_p_z: float = 0.7
    K_d: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.8, 0.3]))

    def __post_init__(self):
        self.K_d = np.asarray(self.K_d, dtype=float)
        if self.k_p_xy <= 0 or self.k_p_z <= 0 or np.any(self.K_d <= 0):
            raise ValueError("attitude gains must be strictly positive")
        if self.k_p_xy <= self.k_p_z:
            raise ValueError("tilt priority requires k_p_xy > k_p_z")


@dataclass
class AttitudeError:
    q_e: np.ndarray
    q_e_yaw: np.ndarray
    q_e_red: np.ndarray
    yaw_singular: bool = False


def attitude_errors(q_d: np.ndarray, q: np.ndarray) -> AttitudeError:
    """Split the attitude error into yaw and reduced (tilt) parts."""
    q_e = quat.multiply(quat.conjugate(q), q_d)
    w, z = q_e[0], q_e[3]
    n = np.hypot(w, z)
    if n < 1e-12:
        # body z is exactly inverted; yaw is undefined there
        q_e_yaw = quat.IDENTITY.copy()
        singular = True
    else:
        q_e_yaw = np.array([w / n, 0.0, 0.0, z / n])
        singular = False
    q_e_red = quat.multiply(quat.conjugate(q_e_yaw), q_e)
    return AttitudeError(q_e, q_e_yaw, q_e_red, singular)


def torque_command(err: AttitudeError, omega: np.ndarray, omega_d: np.ndarray,
                   domega_d: np.ndarray, gains: AttitudeGains, J: np.ndarray) -> np.ndarray:
    """Body torque from the split error, rate error, and feed-forward."""
    J = np.asarray(J, dtype=float)
    R_e = quat.rotmat(err.q_e)
    omega_e = R_e @ omega_d - omega
    domega_e = R_e @ domega_d
    tau_ff = J * domega_e - np.cross(J * omega, omega)
    return (gains.k_p_xy * err.q_e_red[1:]
            + gains.k_p_z * np.sign(err.q_e[0]) * err.q_e_yaw[1:]
            + gains.K_d * omega_e
            + tau_ff)
