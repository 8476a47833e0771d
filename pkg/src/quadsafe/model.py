"""Linear augmented outer-loop model and its exact ZOH discretization.

Augmented state z = [p, v, a_v, j_v] (12-dim), input s_v (3-dim):

    p' = v,  v' = -D v + a_v,  a_v' = j_v,  j_v' = s_v

Each axis is an independent 4-chain with drag d on the velocity row, so the
matrix exponential has a closed form built from the convolution integrals

    E_k(t) = int_0^t exp(-d (t - s)) s^k / k! ds
    G_k(t) = int_0^t E_k(s) ds
"""

from __future__ import annotations

import numpy as np

N_AUG = 12


def augmented_matrices(D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Continuous-time (A_c, B_c) for drag diagonal D."""
    D = np.asarray(D, dtype=float)
    A = np.zeros((12, 12))
    B = np.zeros((12, 3))
    for i in range(3):
        A[i, 3 + i] = 1.0
        A[3 + i, 3 + i] = -D[i]
        A[3 + i, 6 + i] = 1.0
        A[6 + i, 9 + i] = 1.0
        B[9 + i, i] = 1.0
    return A, B


def _chain_entries(d: float, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (A, B) for one drag-damped 4-chain axis."""
    if abs(d) < 1e-12:
        e = 1.0
        E = [t, t * t / 2.0, t**3 / 6.0]
        G = [t * t / 2.0, t**3 / 6.0, t**4 / 24.0]
    else:
        e = np.exp(-d * t)
        E0 = (1.0 - e) / d
        E1 = (t - E0) / d
        E2 = (t * t / 2.0 - E1) / d
        G0 = (t - E0) / d
        G1 = (t * t / 2.0 - G0) / d
        G2 = (t**3 / 6.0 - G1) / d
        E = [E0, E1, E2]
        G = [G0, G1, G2]
    A = np.array([
        [1.0, E[0], G[0], G[1]],
        [0.0, e, E[0], E[1]],
        [0.0, 0.0, 1.0, t],
        [0.0, 0.0, 0.0, 1.0],
    ])
    B = np.array([G[2], E[2], t * t / 2.0, t])
    return A, B


def discretize(A_c: np.ndarray, B_c: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact ZOH pair (A, B) = (e^{A_c T}, int_0^T e^{A_c s} ds B_c).

    A_c, B_c must have the augmented-chain structure from
    :func:`augmented_matrices`; the per-axis drag is read off the velocity
    diagonal.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    A_c = np.asarray(A_c, dtype=float)
    B_c = np.asarray(B_c, dtype=float)
    drag = -np.diag(A_c)[3:6]
    expect_A, expect_B = augmented_matrices(drag)
    if A_c.shape != (12, 12) or not np.array_equal(A_c, expect_A) \
            or not np.array_equal(B_c, expect_B):
        raise ValueError("matrices do not match the augmented-chain structure")
    A = np.zeros((12, 12))
    B = np.zeros((12, 3))
    for i in range(3):
        Ai, Bi = _chain_entries(drag[i], T)
        idx = np.array([i, 3 + i, 6 + i, 9 + i])
        A[np.ix_(idx, idx)] = Ai
        B[idx, i] = Bi
    return A, B
