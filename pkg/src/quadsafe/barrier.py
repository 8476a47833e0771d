"""High-order barrier machinery for linear dynamics.

Everything in the barrier chain is a quadratic form z^T Pi z + pi^T z + c,
which is closed under Lie differentiation along linear dynamics, so the whole
chain h_0 ... h_{rho-1} is computed symbolically. The sampled-data
compensation term is a sound (conservative) lower bound obtained by interval
arithmetic over a reachable-set over-approximation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm


class ChainConfigError(ValueError):
    """Gain list inconsistent with the discovered relative degree."""


@dataclass
class QuadraticForm:
    """value(z) = z^T Pi z + pi^T z + c."""

    Pi: np.ndarray
    pi: np.ndarray
    c: float

    def __post_init__(self):
        self.Pi = np.asarray(self.Pi, dtype=float)
        self.pi = np.asarray(self.pi, dtype=float)
        if np.max(np.abs(self.Pi - self.Pi.T), initial=0.0) > 1e-12:
            raise ValueError("Pi must be symmetric")

    def value(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        return float(z @ self.Pi @ z + self.pi @ z + self.c)

    def gradient(self, z: np.ndarray) -> np.ndarray:
        return 2.0 * self.Pi @ np.asarray(z, float) + self.pi

    def lie_f(self, A_c: np.ndarray) -> "QuadraticForm":
        """Lie derivative along f(z) = A_c z (again a quadratic form)."""
        PA = self.Pi @ A_c
        return QuadraticForm(PA + PA.T, A_c.T @ self.pi, 0.0)

    def lie_g(self, B_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Affine map z -> L_g h(z) = M z + b with M = 2 B^T Pi, b = B^T pi."""
        return 2.0 * B_c.T @ self.Pi, B_c.T @ self.pi

    def scaled_plus(self, scale: float, other: "QuadraticForm") -> "QuadraticForm":
        return QuadraticForm(other.Pi + scale * self.Pi,
                             other.pi + scale * self.pi,
                             other.c + scale * self.c)


@dataclass
class IntervalBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper + 1e-15):
            raise ValueError("lower bound exceeds upper bound")

    def contains(self, z: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(z >= self.lower - tol) and np.all(z <= self.upper + tol))

    def hull(self, other: "IntervalBox") -> "IntervalBox":
        return IntervalBox(np.minimum(self.lower, other.lower),
                           np.maximum(self.upper, other.upper))

    def inflate(self, r: float) -> "IntervalBox":
        return IntervalBox(self.lower - r, self.upper + r)


@dataclass
class BarrierChain:
    h: list
    gains: np.ndarray
    A_c: np.ndarray
    B_c: np.ndarray
    Lf_row: QuadraticForm = field(init=False)
    Lg_M: np.ndarray = field(init=False)
    Lg_b: np.ndarray = field(init=False)

    def __post_init__(self):
        self.gains = np.asarray(self.gains, dtype=float)
        top = self.h[-1]
        self.Lf_row = top.lie_f(self.A_c)
        self.Lg_M, self.Lg_b = top.lie_g(self.B_c)

    @property
    def rho(self) -> int:
        return len(self.h)

    def lie_g_top(self, z: np.ndarray) -> np.ndarray:
        return self.Lg_M @ np.asarray(z, float) + self.Lg_b

    def H(self, z: np.ndarray, u: np.ndarray) -> float:
        """L_f h_{rho-1}(z) + L_g h_{rho-1}(z) u + p_rho h_{rho-1}(z)."""
        return (self.Lf_row.value(z) + float(self.lie_g_top(z) @ np.asarray(u, float))
                + self.gains[-1] * self.h[-1].value(z))

    def values(self, z: np.ndarray) -> np.ndarray:
        return np.array([hi.value(z) for hi in self.h])


def build_chain(h0: QuadraticForm, gains, A_c: np.ndarray, B_c: np.ndarray) -> BarrierChain:
    """Construct h_i = L_f h_{i-1} + p_i h_{i-1} until the input shows up.

    The relative degree is discovered as the first index whose top form has a
    nonvanishing L_g; it must match len(gains) (the last gain is p_rho for the
    final constraint).
    """
    gains = np.asarray(gains, dtype=float)
    if np.any(gains <= 0):
        raise ChainConfigError("class-K gains must be strictly positive")
    A_c = np.asarray(A_c, dtype=float)
    B_c = np.asarray(B_c, dtype=float)
    n = A_c.shape[0]
    forms = [h0]
    for i in range(2 * n + 1):
        M, b = forms[-1].lie_g(B_c)
        if np.max(np.abs(M), initial=0.0) > 1e-12 or np.max(np.abs(b), initial=0.0) > 1e-12:
            rho = len(forms)
            if rho != len(gains):
                raise ChainConfigError(
                    f"relative degree {rho} but {len(gains)} gains given")
            return BarrierChain(forms, gains, A_c, B_c)
        if len(forms) > len(gains):
            raise ChainConfigError(
                f"ran out of gains before the input appeared (>{len(gains)})")
        p_i = gains[len(forms) - 1]
        forms.append(forms[-1].scaled_plus(p_i, forms[-1].lie_f(A_c)))
    raise ChainConfigError("input never appears; h has no finite relative degree")


def barrier_from_spec(kind: str, center, radius: float, n: int = 12) -> QuadraticForm:
    """h0 = ||p_sub - c||^2 - r^2 for cylinder_z (x, y) or sphere (x, y, z)."""
    center = np.asarray(center, dtype=float)
    if kind == "cylinder_z":
        axes = [0, 1]
    elif kind == "sphere":
        axes = [0, 1, 2]
    else:
        raise ValueError(f"unknown barrier kind {kind!r}")
    if len(center) != len(axes):
        raise ValueError("center length does not match barrier kind")
    Pi = np.zeros((n, n))
    pi = np.zeros(n)
    c = -float(radius) ** 2
    for k, ax in enumerate(axes):
        Pi[ax, ax] = 1.0
        pi[ax] = -2.0 * center[k]
        c += center[k] ** 2
    return QuadraticForm(Pi, pi, c)


_TRANSITION_CACHE: dict = {}


def _transition_pairs(A_c, B_c, times):
    """(Phi(t), Gamma(t)) for each t via a block matrix exponential.

    Cached: the MPC re-evaluates the same (A_c, B_c, T, n) grid every step.
    """
    key = (A_c.tobytes(), B_c.tobytes(), times.tobytes())
    hit = _TRANSITION_CACHE.get(key)
    if hit is not None:
        return hit
    n, m = B_c.shape
    blk = np.zeros((n + m, n + m))
    blk[:n, :n] = A_c
    blk[:n, n:] = B_c
    out = []
    for t in times:
        E = expm(blk * t)
        out.append((E[:n, :n], E[:n, n:]))
    if len(_TRANSITION_CACHE) > 64:
        _TRANSITION_CACHE.clear()
    _TRANSITION_CACHE[key] = out
    return out


def _input_image_interval(G: np.ndarray, U: IntervalBox) -> tuple[np.ndarray, np.ndarray]:
    lo_part = np.minimum(G * U.lower, G * U.upper)
    hi_part = np.maximum(G * U.lower, G * U.upper)
    return lo_part.sum(axis=1), hi_part.sum(axis=1)


def _interval_mat_vec(M: np.ndarray, box: IntervalBox) -> tuple[np.ndarray, np.ndarray]:
    lo_part = np.minimum(M * box.lower, M * box.upper)
    hi_part = np.maximum(M * box.lower, M * box.upper)
    return lo_part.sum(axis=1), hi_part.sum(axis=1)


def _speed_bound(A_c, B_c, box: IntervalBox, U: IntervalBox) -> float:
    """sup over the box and U of ||A_c z + B_c u||_inf."""
    zlo, zhi = _interval_mat_vec(A_c, box)
    ulo, uhi = _interval_mat_vec(B_c, U)
    lo = zlo + ulo
    hi = zhi + uhi
    return float(np.max(np.maximum(np.abs(lo), np.abs(hi))))


def _sample_boxes(x_k, T, U, A_c, B_c, n_samples):
    times = np.linspace(0.0, T, n_samples)
    boxes = []
    for Phi, Gamma in _transition_pairs(A_c, B_c, times):
        center = Phi @ x_k
        lo, hi = _input_image_interval(Gamma, U)
        boxes.append(IntervalBox(center + lo, center + hi))
    return boxes


def _segment_inflation(A_c, B_c, seg: IntervalBox, U: IntervalBox, half_dt: float) -> float:
    """Self-consistent radius r with sup-speed(seg + r) * half_dt <= r."""
    M0 = _speed_bound(A_c, B_c, seg, U)
    a_norm = float(np.max(np.abs(A_c).sum(axis=1)))
    denom = 1.0 - a_norm * half_dt
    if denom <= 0:
        raise ValueError("sampling too coarse for the flow's Lipschitz bound")
    return M0 * half_dt / denom


def reach_box(x_k: np.ndarray, T: float, U: IntervalBox, A_c: np.ndarray,
              B_c: np.ndarray, n_samples: int = 11) -> IntervalBox:
    """Interval over-approximation of the states reachable within [0, T].

    Hull of the exact per-time boxes at n_samples times, inflated by a
    Lipschitz bound on the flow between samples; every trajectory point of
    the linear system under any constant u in U lies inside.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    x_k = np.asarray(x_k, dtype=float)
    boxes = _sample_boxes(x_k, T, U, A_c, B_c, n_samples)
    hull = boxes[0]
    for b in boxes[1:]:
        hull = hull.hull(b)
    half_dt = 0.5 * T / (n_samples - 1)
    return hull.inflate(_segment_inflation(A_c, B_c, hull, U, half_dt))


def _quad_lower_bound(q: QuadraticForm, box: IntervalBox) -> float:
    """Sound lower bound of a quadratic form over an interval box."""
    lo, hi = box.lower, box.upper
    total = q.c
    n = len(lo)
    diag = np.diag(q.Pi)
    for i in range(n):
        a, b = diag[i], q.pi[i]
        cand = [a * lo[i] ** 2 + b * lo[i], a * hi[i] ** 2 + b * hi[i]]
        if a > 0:
            v = -b / (2.0 * a)
            if lo[i] <= v <= hi[i]:
                cand.append(a * v * v + b * v)
        total += min(cand)
    for i in range(n):
        for j in range(i + 1, n):
            w = 2.0 * q.Pi[i, j]
            if w == 0.0:
                continue
            prods = [w * zi * zj for zi in (lo[i], hi[i]) for zj in (lo[j], hi[j])]
            total += min(prods)
    return float(total)


def _phi_over_box(chain: BarrierChain, x_k: np.ndarray, box: IntervalBox,
                  U: IntervalBox) -> float:
    """Lower bound of H(z, u) - H(x_k, u) for z in box, u in U."""
    p_rho = chain.gains[-1]
    drift = chain.h[-1].scaled_plus(p_rho, chain.Lf_row)
    quad_lb = _quad_lower_bound(drift, box) - drift.value(x_k)
    # bilinear part: (L_g h(z) - L_g h(x_k)) u = (M (z - x_k)) u, per input row
    shifted = IntervalBox(box.lower - x_k, box.upper - x_k)
    row_lo, row_hi = _interval_mat_vec(chain.Lg_M, shifted)
    bilin = 0.0
    for j in range(len(row_lo)):
        bilin += min(row_lo[j] * U.lower[j], row_lo[j] * U.upper[j],
                     row_hi[j] * U.lower[j], row_hi[j] * U.upper[j])
    return quad_lb + bilin


def _box_quadratic_min_batch(Qs: np.ndarray, qs: np.ndarray, lo: np.ndarray,
                             hi: np.ndarray) -> np.ndarray:
    """Exact global minima of u^T Q u + q^T u over a small box, batched.

    Enumerates every face of the box; on each face the minimum is either at
    a stationary point with positive definite reduced Hessian or on the
    face's own boundary, which a lower-dimensional face covers.
    """
    m = qs.shape[-1]
    nt = qs.shape[0]
    best = np.full(nt, np.inf)
    for pattern in itertools.product((0, 1, 2), repeat=m):
        free = [i for i, p in enumerate(pattern) if p == 0]
        fixed = [i for i, p in enumerate(pattern) if p != 0]
        base = np.where(np.asarray(pattern) == 2, hi, lo).astype(float)
        u = np.tile(base, (nt, 1))
        valid = np.ones(nt, dtype=bool)
        if free:
            Qff = 2.0 * Qs[np.ix_(np.arange(nt), free, free)]
            pd = np.linalg.eigvalsh(Qff)[:, 0] > 0
            rhs = -qs[:, free]
            if fixed:
                rhs = rhs - 2.0 * np.einsum(
                    "tij,j->ti", Qs[np.ix_(np.arange(nt), free, fixed)], base[fixed])
            if not np.any(pd):
                continue
            uf = np.full((nt, len(free)), np.nan)
            uf[pd] = np.linalg.solve(Qff[pd], rhs[pd][..., None])[..., 0]
            valid = pd & np.all(uf >= lo[free], axis=1) & np.all(uf <= hi[free], axis=1)
            uf[~valid] = 0.0
            for j, i in enumerate(free):
                u[:, i] = uf[:, j]
        vals = np.einsum("ti,tij,tj->t", u, Qs, u) + np.einsum("ti,ti->t", qs, u)
        best = np.minimum(best, np.where(valid, vals, np.inf))
    return best


def _box_quadratic_min(Q: np.ndarray, q: np.ndarray, lo: np.ndarray,
                       hi: np.ndarray) -> float:
    """Exact global minimum of a single small quadratic over a box."""
    return float(_box_quadratic_min_batch(Q[None], q[None], np.asarray(lo, float),
                                          np.asarray(hi, float))[0])


def _phi_rate_bound(chain: BarrierChain, drift: QuadraticForm, x_k: np.ndarray,
                    T: float, U: IntervalBox, n_samples: int) -> float:
    """sup over the reach hull and U of |d/dt [H(z(t), u) - H(x_k, u)]|."""
    box = reach_box(x_k, T, U, chain.A_c, chain.B_c, n_samples)
    zdot_lo, zdot_hi = _interval_mat_vec(chain.A_c, box)
    ulo, uhi = _interval_mat_vec(chain.B_c, U)
    zdot = IntervalBox(zdot_lo + ulo, zdot_hi + uhi)
    grad_lo, grad_hi = _interval_mat_vec(2.0 * drift.Pi, box)
    grad_lo, grad_hi = grad_lo + drift.pi, grad_hi + drift.pi
    # first term: gradient of the drift quadratic dotted with the flow speed
    prods = np.stack([grad_lo * zdot.lower, grad_lo * zdot.upper,
                      grad_hi * zdot.lower, grad_hi * zdot.upper])
    total_lo = float(prods.min(axis=0).sum())
    total_hi = float(prods.max(axis=0).sum())
    # second term: u^T d/dt (L_g h) = u^T (M zdot), M = 2 B^T Pi
    w_lo, w_hi = _interval_mat_vec(chain.Lg_M, zdot)
    prods = np.stack([w_lo * U.lower, w_lo * U.upper, w_hi * U.lower, w_hi * U.upper])
    total_lo += float(prods.min(axis=0).sum())
    total_hi += float(prods.max(axis=0).sum())
    return max(abs(total_lo), abs(total_hi))


def _phi_zoh_grid(chain: BarrierChain, x_k: np.ndarray, T: float, U: IntervalBox,
                  n_samples: int) -> float:
    """Tight bound exploiting the zero-order hold: the reached state and the
    input in the H-difference are coupled, z(t) = Phi(t) x_k + Gamma(t) u.

    For each grid time the difference is an exact quadratic in u, minimized
    exactly over the input box; a Lipschitz bound on the time derivative
    covers the gaps between grid points.
    """
    p_rho = chain.gains[-1]
    drift = chain.h[-1].scaled_plus(p_rho, chain.Lf_row)
    times = np.linspace(0.0, T, n_samples)
    key = (T, n_samples)
    cache = getattr(chain, "_zoh_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(chain, "_zoh_cache", cache)
    if key not in cache:
        pairs = _transition_pairs(chain.A_c, chain.B_c, times)
        Phis = np.stack([P for P, _ in pairs])
        Gams = np.stack([G for _, G in pairs])
        # Hessian of the u-quadratic is state independent:
        # G^T Pi_W G plus the symmetrized bilinear coupling M G, M = 2 B^T Pi.
        MG = np.einsum("ij,tjk->tik", chain.Lg_M, Gams)
        Qs = (np.einsum("tji,jk,tkl->til", Gams, drift.Pi, Gams)
              + 0.5 * (MG + np.transpose(MG, (0, 2, 1))))
        cache[key] = (Phis, Gams, Qs)
    Phis, Gams, Qs = cache[key]
    a = Phis @ x_k
    grad = 2.0 * (a @ drift.Pi) + drift.pi           # (nt, 12)
    qs = np.einsum("tji,tj->ti", Gams, grad) + (a - x_k) @ chain.Lg_M.T
    cs = (np.einsum("ti,ij,tj->t", a, drift.Pi, a) + a @ drift.pi + drift.c
          - drift.value(x_k))
    mins = _box_quadratic_min_batch(Qs, qs, U.lower, U.upper) + cs
    phi = min(0.0, float(np.min(mins)))
    rate = _phi_rate_bound(chain, drift, x_k, T, U, n_samples)
    half_dt = 0.5 * T / (n_samples - 1)
    return phi - rate * half_dt


def compensation_phi(chain: BarrierChain, x_k: np.ndarray, T: float, U: IntervalBox,
                     n_samples: int = 11, refine: bool = False) -> float:
    """Sound lower bound on inf over the reachable set of the H-difference.

    The default decouples the reached state from the input and bounds the
    difference by interval arithmetic over a reachable-set box. refine=True
    switches to the tighter zero-order-hold grid bound, which couples the
    reached state to the constant input that produced it.
    """
    x_k = np.asarray(x_k, dtype=float)
    if not np.all(np.isfinite(U.lower)) or not np.all(np.isfinite(U.upper)):
        return -1e30
    if refine:
        return float(min(_phi_zoh_grid(chain, x_k, T, U, n_samples), 0.0))
    box = reach_box(x_k, T, U, chain.A_c, chain.B_c, n_samples)
    return float(min(_phi_over_box(chain, x_k, box, U), 0.0))


def hocbf_constraint_row(chain: BarrierChain, z_k: np.ndarray, phi: float
                         ) -> tuple[np.ndarray, float]:
    """Affine row coeff . s_v >= rhs enforcing the (sampled-data) HOCBF."""
    z_k = np.asarray(z_k, dtype=float)
    coeff = chain.lie_g_top(z_k)
    rhs = -chain.Lf_row.value(z_k) - chain.gains[-1] * chain.h[-1].value(z_k) - phi
    return coeff, rhs
