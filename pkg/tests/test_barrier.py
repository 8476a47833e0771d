"""Barrier chain, reachable boxes, and the sampled-data compensation term.

Oracles: finite differences along simulated flows for the Lie-derivative
chain, Monte-Carlo trajectory sampling for reachable-set containment, and
dense (t, u) grids for the compensation bound.
"""

import numpy as np
import pytest
from scipy.linalg import expm

from quadsafe import barrier as bar
from quadsafe import model


@pytest.fixture(scope="module")
def aug():
    return model.augmented_matrices([0.25] * 3)


@pytest.fixture(scope="module")
def chain(aug):
    h0 = bar.barrier_from_spec("cylinder_z", [0.0, 2.0], 1.0)
    return bar.build_chain(h0, [5.0] * 4, *aug)


def transition(A_c, B_c, t):
    n, m = B_c.shape
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = A_c
    blk[:n, n:] = B_c
    E = expm(blk * t)
    return E[:n, :n], E[:n, n:]


def random_state(rng, scale=2.0):
    return rng.normal(scale=scale, size=12)


# ---------------------------------------------------------------- chain

def test_relative_degree_is_four(aug, chain):
    assert chain.rho == 4
    # input must not appear before the top of the chain
    for form in chain.h[:-1]:
        M, b = form.lie_g(aug[1])
        assert np.max(np.abs(M)) <= 1e-12 and np.max(np.abs(b)) <= 1e-12
    M, b = chain.h[-1].lie_g(aug[1])
    assert np.max(np.abs(M)) > 1e-12


def test_lie_g_top_is_position_offset(chain):
    """For the distance barrier the input row is 2 (p - c) (x, y only)."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        z = random_state(rng)
        row = chain.lie_g_top(z)
        assert np.allclose(row, [2.0 * z[0], 2.0 * (z[1] - 2.0), 0.0], atol=1e-9)


def test_chain_recursion_fd_oracle(aug, chain):
    """h_{i+1} = dh_i/dt + p h_i along the autonomous flow (FD in time)."""
    A_c, _ = aug
    rng = np.random.default_rng(1)
    eps = 1e-6
    Phi_p = expm(A_c * eps)
    Phi_m = expm(-A_c * eps)
    for _ in range(20):
        z = random_state(rng)
        for i in range(3):
            hdot = (chain.h[i].value(Phi_p @ z) - chain.h[i].value(Phi_m @ z)) / (2 * eps)
            lhs = chain.h[i + 1].value(z)
            assert np.isclose(lhs, hdot + 5.0 * chain.h[i].value(z),
                              rtol=1e-5, atol=1e-5)


def test_H_fd_oracle(aug, chain):
    """H(z, u) = dh_3/dt along the controlled flow + p h_3 (FD oracle)."""
    A_c, B_c = aug
    rng = np.random.default_rng(2)
    eps = 1e-6
    for _ in range(20):
        z = random_state(rng)
        u = rng.uniform(-40, 40, size=3)
        Pp, Gp = transition(A_c, B_c, eps)
        Pm, Gm = transition(A_c, B_c, -eps)
        hdot = (chain.h[3].value(Pp @ z + Gp @ u)
                - chain.h[3].value(Pm @ z + Gm @ u)) / (2 * eps)
        assert np.isclose(chain.H(z, u), hdot + 5.0 * chain.h[3].value(z),
                          rtol=1e-5, atol=1e-4)


def test_build_chain_errors(aug):
    h0 = bar.barrier_from_spec("cylinder_z", [0.0, 2.0], 1.0)
    with pytest.raises(bar.ChainConfigError):
        bar.build_chain(h0, [5.0] * 3, *aug)  # too few gains
    with pytest.raises(bar.ChainConfigError):
        bar.build_chain(h0, [5.0, -1.0, 5.0, 5.0], *aug)


def test_barrier_from_spec_kinds():
    h = bar.barrier_from_spec("sphere", [1.0, 2.0, 3.0], 0.5)
    assert np.isclose(h.value(np.r_[1.0, 2.0, 3.5, np.zeros(9)]), 0.0)
    with pytest.raises(ValueError):
        bar.barrier_from_spec("box", [0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        bar.barrier_from_spec("cylinder_z", [0.0, 0.0, 0.0], 1.0)


def test_quadratic_form_lie_consistency(aug):
    """lie_f agrees with grad h . A z pointwise."""
    A_c, _ = aug
    rng = np.random.default_rng(3)
    Pi = rng.normal(size=(12, 12))
    Pi = 0.5 * (Pi + Pi.T)
    q = bar.QuadraticForm(Pi, rng.normal(size=12), rng.normal())
    lf = q.lie_f(A_c)
    for _ in range(10):
        z = random_state(rng)
        assert np.isclose(lf.value(z), q.gradient(z) @ (A_c @ z), rtol=1e-10)


# ---------------------------------------------------------------- reach box

def test_reach_box_containment_monte_carlo(aug):
    """10^4 random (t, u) trajectory points all lie inside the box."""
    A_c, B_c = aug
    rng = np.random.default_rng(4)
    U = bar.IntervalBox(np.full(3, -40.0), np.full(3, 40.0))
    ts = rng.uniform(0.0, 0.1, size=100)
    pairs = [transition(A_c, B_c, t) for t in ts]
    for _ in range(10):
        x = random_state(rng, scale=3.0)
        box = bar.reach_box(x, 0.1, U, A_c, B_c)
        us = rng.uniform(-40.0, 40.0, size=(10, 3))
        for P, G in pairs:
            for u in us:
                assert box.contains(P @ x + G @ u, tol=1e-9)


def test_reach_box_shrinks_with_T(aug):
    A_c, B_c = aug
    U = bar.IntervalBox(np.full(3, -40.0), np.full(3, 40.0))
    x = np.ones(12)
    wide = bar.reach_box(x, 0.1, U, A_c, B_c)
    tight = bar.reach_box(x, 0.01, U, A_c, B_c)
    assert np.all(tight.lower >= wide.lower - 1e-12)
    assert np.all(tight.upper <= wide.upper + 1e-12)


def test_interval_box_validation():
    with pytest.raises(ValueError):
        bar.IntervalBox(np.array([1.0]), np.array([0.0]))


# ------------------------------------------------- box-constrained quadratics

def brute_force_box_min(Q, q, lo, hi, n_grid=60):
    grids = [np.linspace(lo[i], hi[i], n_grid) for i in range(len(lo))]
    mesh = np.meshgrid(*grids, indexing="ij")
    U = np.stack([m.ravel() for m in mesh], axis=1)
    vals = np.einsum("ni,ij,nj->n", U, Q, U) + U @ q
    return vals.min()


def test_box_quadratic_min_vs_grid():
    rng = np.random.default_rng(5)
    for _ in range(40):
        m = rng.integers(1, 4)
        Q = rng.normal(size=(m, m))
        Q = 0.5 * (Q + Q.T)
        q = rng.normal(size=m)
        lo = -rng.uniform(0.5, 2.0, size=m)
        hi = rng.uniform(0.5, 2.0, size=m)
        exact = bar._box_quadratic_min(Q, q, lo, hi)
        grid = brute_force_box_min(Q, q, lo, hi)
        assert exact <= grid + 1e-9          # exact min is a lower bound
        assert exact >= grid - 0.05          # and the grid approaches it


def test_quad_lower_bound_sound():
    rng = np.random.default_rng(6)
    for _ in range(30):
        Pi = rng.normal(size=(12, 12))
        Pi = 0.5 * (Pi + Pi.T)
        q = bar.QuadraticForm(Pi, rng.normal(size=12), rng.normal())
        lo = -rng.uniform(0.1, 1.0, size=12)
        hi = rng.uniform(0.1, 1.0, size=12)
        box = bar.IntervalBox(lo, hi)
        lb = bar._quad_lower_bound(q, box)
        Z = rng.uniform(lo, hi, size=(500, 12))
        vals = np.einsum("ni,ij,nj->n", Z, q.Pi, Z) + Z @ q.pi + q.c
        assert lb <= vals.min() + 1e-9


# ------------------------------------------------------------- compensation

_PAIR_CACHE = {}


def dense_grid_infimum(chain, x, T, U, nt=60, nu=5):
    """min over a dense (t, u) grid of H(z(t, u), u) - H(x, u)."""
    A_c, B_c = chain.A_c, chain.B_c
    key = (A_c.tobytes(), T, nt)
    if key not in _PAIR_CACHE:
        _PAIR_CACHE[key] = [transition(A_c, B_c, t) for t in np.linspace(0.0, T, nt)]
    pairs = _PAIR_CACHE[key]
    grids = np.meshgrid(*[np.linspace(U.lower[j], U.upper[j], nu) for j in range(3)],
                        indexing="ij")
    us = np.stack([g.ravel() for g in grids], axis=1)
    drift = chain.h[-1].scaled_plus(chain.gains[-1], chain.Lf_row)
    best = np.inf
    for P, G in pairs:
        Z = (P @ x)[None, :] + us @ G.T
        d = (np.einsum("ni,ij,nj->n", Z, drift.Pi, Z) + Z @ drift.pi + drift.c
             - drift.value(x)
             + np.einsum("ni,ni->n", (Z - x) @ chain.Lg_M.T, us))
        best = min(best, float(d.min()))
    return best


@pytest.mark.parametrize("refine", [False, True])
def test_phi_soundness_random_states(chain, refine):
    rng = np.random.default_rng(7)
    U = bar.IntervalBox(np.full(3, -40.0), np.full(3, 40.0))
    for _ in range(20):
        x = random_state(rng, scale=3.0)
        phi = bar.compensation_phi(chain, x, 0.1, U,
                                   n_samples=41 if refine else 11, refine=refine)
        assert phi <= 0.0
        assert dense_grid_infimum(chain, x, 0.1, U) >= phi - 1e-9


def test_refine_is_tighter(chain):
    rng = np.random.default_rng(8)
    U = bar.IntervalBox(np.full(3, -40.0), np.full(3, 40.0))
    for _ in range(10):
        x = random_state(rng, scale=3.0)
        loose = bar.compensation_phi(chain, x, 0.1, U, refine=False)
        tight = bar.compensation_phi(chain, x, 0.1, U, n_samples=101, refine=True)
        assert tight >= loose - 1e-9


def test_phi_double_integrator_within_10x_of_grid():
    """1-D double integrator, h = 1 - p^2, u in [-1, 1], vs a 200x200 grid."""
    A_c = np.array([[0.0, 1.0], [0.0, 0.0]])
    B_c = np.array([[0.0], [1.0]])
    h0 = bar.QuadraticForm(np.diag([-1.0, 0.0]), np.zeros(2), 1.0)
    ch = bar.build_chain(h0, [5.0, 5.0], A_c, B_c)
    U = bar.IntervalBox(np.array([-1.0]), np.array([1.0]))
    rng = np.random.default_rng(9)
    pairs = [transition(A_c, B_c, t) for t in np.linspace(0.0, 0.1, 200)]
    us = np.linspace(-1.0, 1.0, 200)
    # H(z, u) - H(x, u) evaluated in closed form on the whole (t, u) grid
    drift = ch.h[-1].scaled_plus(ch.gains[-1], ch.Lf_row)
    for _ in range(100):
        x = rng.normal(scale=1.0, size=2)
        phi = bar.compensation_phi(ch, x, 0.1, U, refine=True, n_samples=101)
        best = np.inf
        for P, G in pairs:
            Z = (P @ x)[None, :] + us[:, None] * G.ravel()[None, :]
            d = (np.einsum("ni,ij,nj->n", Z, drift.Pi, Z) + Z @ drift.pi
                 + drift.c - drift.value(x)
                 + ((Z - x) @ ch.Lg_M.T).ravel() * us)
            best = min(best, float(d.min()))
        assert phi <= best + 1e-9
        if best < -1e-6:
            assert abs(phi) <= 10.0 * abs(best)


def test_phi_unbounded_inputs_guard(chain):
    U = bar.IntervalBox(np.full(3, -np.inf), np.full(3, np.inf))
    assert bar.compensation_phi(chain, np.zeros(12), 0.1, U) == -1e30


def test_constraint_row_consistency(chain):
    """coeff . u - rhs equals H(z, u) + phi for every u (affine identity)."""
    rng = np.random.default_rng(10)
    for _ in range(20):
        z = random_state(rng)
        phi = -rng.uniform(0.0, 100.0)
        coeff, rhs = bar.hocbf_constraint_row(chain, z, phi)
        for _ in range(5):
            u = rng.uniform(-40, 40, size=3)
            assert np.isclose(coeff @ u - rhs, chain.H(z, u) + phi, rtol=1e-9,
                              atol=1e-9)
