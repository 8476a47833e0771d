"""Dense convex cone programs: quadratic cost, equalities, boxes, linear
rows, and second-order cones.

The numerical core is cvxopt's interior-point solver (coneqp / conelp); this
module owns the problem container, the translation into cvxopt's (G, h, dims)
form, independent KKT residual checks, and the status contract. cvxopt is
deterministic: identical programs produce identical iterates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
from cvxopt import matrix as cvxmat
from cvxopt import solvers as cvxsolvers
from cvxopt import spmatrix as cvxspmat

_SOLVER_OPTS = {
    "show_progress": False,
    "maxiters": 40,
    "abstol": 1e-8,
    "reltol": 1e-8,
    "feastol": 1e-8,
    "refinement": 1,
}


@dataclass
class SocRow:
    """||F x + g||_2 <= a^T x + b."""

    F: np.ndarray
    g: np.ndarray
    a: np.ndarray
    b: float


@dataclass
class LinRow:
    """c^T x >= d."""

    c: np.ndarray
    d: float


@dataclass
class ConeProgram:
    n: int
    H: np.ndarray | None = None
    f: np.ndarray | None = None
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    soc_rows: list = field(default_factory=list)
    lin_rows: list = field(default_factory=list)

    def __post_init__(self):
        if self.H is None:
            self.H = np.zeros((self.n, self.n))
        self.H = np.asarray(self.H, dtype=float)
        if self.f is None:
            self.f = np.zeros(self.n)
        self.f = np.asarray(self.f, dtype=float)
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-9:
            raise ValueError("cost matrix must be symmetric")
        jitter = 1e-9 * max(1.0, float(np.max(np.abs(self.H), initial=0.0)))
        try:
            np.linalg.cholesky(self.H + jitter * np.eye(self.n))
        except np.linalg.LinAlgError:
            raise ValueError("cost matrix must be positive semidefinite") from None

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.f @ x)


@dataclass
class SolverConfig:
    feas_tol: float = 1e-6
    stat_tol: float = 1e-5


@dataclass
class KktResiduals:
    eq: float
    box: float
    lin: float
    cone: float
    stationarity: float

    def primal_ok(self, tol: float) -> bool:
        return max(self.eq, self.box, self.lin, self.cone) <= tol


@dataclass
class Solution:
    x: np.ndarray
    status: str
    iterations: int
    solve_time: float
    kkt: KktResiduals | None


def _inequality_stack(p: ConeProgram):
    """cvxopt (G, h, dims): nonneg rows first, then one SOC block per row."""
    n = p.n
    G_rows = []
    h_vals = []
    for bound, sign in ((p.lb, -1.0), (p.ub, 1.0)):
        if bound is not None:
            idx = np.flatnonzero(np.isfinite(bound))
            B = np.zeros((len(idx), n))
            B[np.arange(len(idx)), idx] = sign
            G_rows.extend(B)
            h_vals.extend(sign * bound[idx])
    for r in p.lin_rows:
        G_rows.append(-np.asarray(r.c, dtype=float))
        h_vals.append(-r.d)
    n_lin = len(G_rows)
    soc_dims = []
    for s in p.soc_rows:
        F = np.atleast_2d(np.asarray(s.F, dtype=float))
        g = np.atleast_1d(np.asarray(s.g, dtype=float))
        G_rows.append(-np.asarray(s.a, dtype=float))
        h_vals.append(s.b)
        for k in range(F.shape[0]):
            G_rows.append(F[k])
            h_vals.append(-g[k])
        soc_dims.append(F.shape[0] + 1)
    G = np.array(G_rows) if G_rows else np.zeros((0, n))
    h = np.array(h_vals)
    dims = {"l": n_lin, "q": soc_dims, "s": []}
    return G, h, dims


def kkt_residuals(p: ConeProgram, x: np.ndarray, duals=None,
                  G: np.ndarray | None = None) -> KktResiduals:
    """Primal feasibility residuals, plus stationarity if duals are given.

    duals, when present, is (y, z_stack) with y the equality multipliers and
    z_stack the cone multipliers in the same order as the internal G stack.
    """
    x = np.asarray(x, dtype=float)
    eq = 0.0
    if p.Aeq is not None and len(p.Aeq):
        eq = float(np.max(np.abs(p.Aeq @ x - p.beq)))
    box = 0.0
    if p.lb is not None:
        box = max(box, float(np.max(np.maximum(p.lb - x, 0.0), initial=0.0)))
    if p.ub is not None:
        box = max(box, float(np.max(np.maximum(x - p.ub, 0.0), initial=0.0)))
    lin = 0.0
    for r in p.lin_rows:
        lin = max(lin, max(0.0, r.d - float(np.dot(r.c, x))))
    cone = 0.0
    for s in p.soc_rows:
        F = np.atleast_2d(np.asarray(s.F, dtype=float))
        g = np.atleast_1d(np.asarray(s.g, dtype=float))
        cone = max(cone, max(0.0, float(np.linalg.norm(F @ x + g) - np.dot(s.a, x) - s.b)))
    stat = np.inf
    if duals is not None:
        y, z = duals
        grad = p.H @ x + p.f
        if p.Aeq is not None and len(p.Aeq):
            grad = grad + p.Aeq.T @ y
        if G is None:
            G, _, _ = _inequality_stack(p)
        if len(z):
            grad = grad + G.T @ z
        stat = float(np.max(np.abs(grad), initial=0.0))
    return KktResiduals(eq, box, lin, cone, stat)


def dump_program(p: ConeProgram, path) -> None:
    """Text fixture: dimensions plus dense row-major matrices, 17 sig digits."""
    def w(fh, name, arr):
        arr = np.atleast_2d(np.asarray(arr, dtype=float))
        fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")

    with open(path, "w") as fh:
        fh.write(f"n {p.n}\n")
        w(fh, "H", p.H)
        w(fh, "f", p.f)
        if p.Aeq is not None:
            w(fh, "Aeq", p.Aeq)
            w(fh, "beq", p.beq)
        if p.lb is not None:
            w(fh, "lb", p.lb)
        if p.ub is not None:
            w(fh, "ub", p.ub)
        for k, r in enumerate(p.lin_rows):
            w(fh, f"lin_c_{k}", r.c)
            w(fh, f"lin_d_{k}", [[r.d]])
        for k, s in enumerate(p.soc_rows):
            w(fh, f"soc_F_{k}", s.F)
            w(fh, f"soc_g_{k}", s.g)
            w(fh, f"soc_a_{k}", s.a)
            w(fh, f"soc_b_{k}", [[s.b]])


def _sparse(arr: np.ndarray):
    """cvxopt sparse matrix from a dense array; keeps KKT factorizations sparse."""
    coo = scipy.sparse.coo_matrix(arr)
    return cvxspmat(coo.data.tolist(), coo.row.tolist(), coo.col.tolist(),
                    size=arr.shape)


def _make_kktsolver(P, A, G, dims):
    """Sparse-LU factorization of the full KKT matrix.

    cvxopt's default KKT solver for problems with second-order cones runs a
    dense QR each iteration; the MPC programs here are large but very sparse,
    so factoring [P A' G'; A 0 0; G 0 -W'W] with a sparse LU is much faster.
    The returned closure follows the coneqp kktsolver contract: on exit the
    z argument holds W*uz.
    """
    n = P.shape[0]
    p = A.shape[0]
    m = G.shape[0]
    dim = n + p + m
    Pc = scipy.sparse.csc_matrix(P)
    Ac = scipy.sparse.csc_matrix(A) if p else scipy.sparse.csc_matrix((0, n))
    Gc = scipy.sparse.csc_matrix(G) if m else scipy.sparse.csc_matrix((0, n))
    K_fixed = scipy.sparse.bmat(
        [[Pc, Ac.T if p else None, Gc.T if m else None],
         [Ac if p else None,
          scipy.sparse.csc_matrix((p, p)) if p else None, None],
         [Gc if m else None, None,
          scipy.sparse.csc_matrix((m, m)) if m else None]],
        format="csc")
    n_lin = dims["l"]
    qs = list(dims["q"])
    uniform_q = qs[0] if qs and len(set(qs)) == 1 else 0
    J_blocks = [np.diag(np.r_[1.0, -np.ones(q - 1)]) for q in qs]
    # Index pattern of the -W'W block (diagonal for the nonneg rows, one
    # dense sub-block per second-order cone); values change every iteration.
    rows = [np.arange(n_lin)]
    cols = [np.arange(n_lin)]
    off = n_lin
    for q in qs:
        rr, cc = np.meshgrid(np.arange(q), np.arange(q), indexing="ij")
        rows.append(off + rr.ravel())
        cols.append(off + cc.ravel())
        off += q
    w_rows = n + p + np.concatenate(rows) if m else np.zeros(0, dtype=int)
    w_cols = n + p + np.concatenate(cols) if m else np.zeros(0, dtype=int)

    # Merge the fixed entries and the scaling pattern into one immutable CSC
    # structure; per iteration only the data vector is refilled (the two
    # patterns are disjoint: the lower-right block of K_fixed is empty).
    Kf_coo = K_fixed.tocoo()
    all_rows = np.concatenate([Kf_coo.row, w_rows])
    all_cols = np.concatenate([Kf_coo.col, w_cols])
    order = scipy.sparse.coo_matrix(
        (np.arange(1, len(all_rows) + 1, dtype=float), (all_rows, all_cols)),
        shape=(dim, dim)).tocsc()
    assert order.nnz == len(all_rows)  # patterns must not overlap
    perm = order.data.astype(np.intp) - 1
    K_indices, K_indptr = order.indices, order.indptr
    fixed_data = Kf_coo.data
    n_scale = len(w_rows)

    def kktsolver(W):
        d = np.asarray(W["d"]).ravel()
        scale = np.empty(n_scale)
        scale[:n_lin] = -(d * d)
        if uniform_q:
            q = uniform_q
            V = np.array([np.asarray(v).ravel() for v in W["v"]])
            beta = np.asarray([float(b) for b in W["beta"]])
            Wk_all = beta[:, None, None] * (2.0 * V[:, :, None] * V[:, None, :]
                                            - J_blocks[0])
            scale[n_lin:] = -np.einsum("kij,kjl->kil", Wk_all, Wk_all).ravel()
            soc_W = Wk_all
        else:
            soc_W = []
            off = n_lin
            for v_m, beta, J in zip(W["v"], W["beta"], J_blocks):
                v = np.asarray(v_m).ravel()
                Wk = beta * (2.0 * np.outer(v, v) - J)
                soc_W.append(Wk)
                scale[off:off + Wk.size] = -(Wk @ Wk).ravel()
                off += Wk.size
        data = np.concatenate([fixed_data, scale])[perm]
        K = scipy.sparse.csc_matrix((data, K_indices, K_indptr),
                                    shape=(dim, dim))
        # Relaxed pivoting keeps fill-in low; the outer KKT residual check in
        # solve() guards against any resulting loss of accuracy.
        lu = scipy.sparse.linalg.splu(K, diag_pivot_thresh=0.1,
                                      permc_spec="NATURAL")

        def g(x, y, z):
            rhs = np.concatenate([np.asarray(x).ravel(),
                                  np.asarray(y).ravel(),
                                  np.asarray(z).ravel()])
            sol = lu.solve(rhs)
            if not np.all(np.isfinite(sol)):
                raise ArithmeticError("singular KKT system")
            x[:] = cvxmat(sol[:n])
            if p:
                y[:] = cvxmat(sol[n:n + p])
            uz = sol[n + p:]
            scaled = np.empty_like(uz)
            scaled[:n_lin] = d * uz[:n_lin]
            if uniform_q:
                blocks = uz[n_lin:].reshape(-1, uniform_q)
                scaled[n_lin:] = np.einsum("kij,kj->ki", soc_W, blocks).ravel()
            else:
                off = n_lin
                for Wk in soc_W:
                    q = Wk.shape[0]
                    scaled[off:off + q] = Wk @ uz[off:off + q]
                    off += q
            if m:
                z[:] = cvxmat(scaled)

        return g

    return kktsolver


def solve(p: ConeProgram, cfg: SolverConfig | None = None) -> Solution:
    """Solve the program; status is optimal only if KKT residuals check out."""
    cfg = cfg or SolverConfig()
    G, h, dims = _inequality_stack(p)
    have_quad = np.max(np.abs(p.H), initial=0.0) > 0.0
    A = p.Aeq if p.Aeq is not None and len(p.Aeq) else None
    kwargs = {}
    if A is not None:
        kwargs["A"] = _sparse(np.asarray(A, dtype=float))
        kwargs["b"] = cvxmat(np.asarray(p.beq, dtype=float))
    t0 = time.perf_counter()
    old = dict(cvxsolvers.options)
    cvxsolvers.options.update(_SOLVER_OPTS)
    try:
        if have_quad:
            Aeq_np = np.asarray(A, dtype=float) if A is not None else np.zeros((0, p.n))
            kwargs["kktsolver"] = _make_kktsolver(p.H, Aeq_np, G, dims)
            res = cvxsolvers.coneqp(_sparse(p.H), cvxmat(p.f), _sparse(G),
                                    cvxmat(h), dims, **kwargs)
        else:
            res = cvxsolvers.conelp(cvxmat(p.f), _sparse(G), cvxmat(h), dims,
                                    **kwargs)
    except (ValueError, ArithmeticError, ZeroDivisionError):
        return Solution(np.full(p.n, np.nan), "infeasible", 0,
                        time.perf_counter() - t0, None)
    finally:
        cvxsolvers.options.clear()
        cvxsolvers.options.update(old)
    elapsed = time.perf_counter() - t0
    iters = int(res.get("iterations", 0))
    if res["x"] is None:
        return Solution(np.full(p.n, np.nan), "infeasible", iters, elapsed, None)
    x = np.asarray(res["x"]).ravel()
    y = np.asarray(res["y"]).ravel() if res.get("y") is not None else np.zeros(0)
    z = np.asarray(res["z"]).ravel() if res.get("z") is not None else np.zeros(0)
    kkt = kkt_residuals(p, x, duals=(y, z), G=G)
    status = res["status"]
    if status == "optimal":
        if not kkt.primal_ok(cfg.feas_tol) or kkt.stationarity > cfg.stat_tol:
            status = "max_iter"
    elif status in ("primal infeasible", "dual infeasible"):
        status = "infeasible"
    else:
        status = "max_iter" if kkt.primal_ok(cfg.feas_tol) else "infeasible"
    return Solution(x, status, iters, elapsed, kkt)
