"""Outer-loop controller family.

Builds the tracking program over the discretized augmented model and attaches
one of five safety mechanisms:

  sdhocbf      compensated barrier row at the first prediction step (SOCP)
  hocbf_filter no barrier in the MPC; continuous HOCBF row as a QP filter
  mpc_dc       distance constraints over the horizon (SCP, = dcbf at lambda 1)
  dcbf         one-step decay rows over the horizon (SCP)
  dhocbf       decay rows at a fixed index subset (SCP)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import barrier as bar
from . import cone_solver as cs
from . import model
from .sim import QuadParams

DHOCBF_DEFAULT_STEPS = (0, 1, 3, 4)

KINDS = ("sdhocbf", "hocbf_filter", "mpc_dc", "dcbf", "dhocbf")


class InfeasibleRun(RuntimeError):
    """Raised after two consecutive infeasible outer-loop solves."""


@dataclass
class MpcConfig:
    N: int = 20
    T: float = 0.1
    Q: np.ndarray = field(default_factory=lambda: np.diag([100.0] * 3 + [1.0] * 9))
    P: np.ndarray = None
    R: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(3))
    s_max: float = 40.0
    f_max: float = 12.0
    relax_to_qp: bool = False
    phi_samples: int = 11
    phi_refine: bool = True
    scp_max_iter: int = 10
    scp_tol: float = 1e-6
    dhocbf_steps: tuple = DHOCBF_DEFAULT_STEPS

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        if self.P is None:
            self.P = 10.0 * self.Q
        self.P = np.asarray(self.P, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        if self.N < 1 or self.T <= 0:
            raise ValueError("need N >= 1 and T > 0")
        for M in (self.Q, self.P, self.R):
            if np.min(np.linalg.eigvalsh(M)) <= 0:
                raise ValueError("weight matrices must be positive definite")


def discretize(A_c: np.ndarray, B_c: np.ndarray, T: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact ZOH discretization of the augmented model (closed form)."""
    return model.discretize(A_c, B_c, T)


def _z_off(i: int) -> int:
    return 12 * (i - 1)


def _s_off(i: int, N: int) -> int:
    return 12 * N + 3 * i


def build_tracking_program(z_k: np.ndarray, Z_bar: np.ndarray, S_bar: np.ndarray,
                           cfg: MpcConfig, A: np.ndarray, B: np.ndarray,
                           prm: QuadParams) -> cs.ConeProgram:
    """Dense stacked tracking program: dynamics equalities, input box, thrust
    cone per predicted state (no barrier rows)."""
    N = cfg.N
    n = 15 * N
    H = np.zeros((n, n))
    f = np.zeros(n)
    for i in range(1, N + 1):
        W = cfg.P if i == N else cfg.Q
        o = _z_off(i)
        H[o:o + 12, o:o + 12] = 2.0 * W
        f[o:o + 12] = -2.0 * W @ Z_bar[i]
    for i in range(N):
        o = _s_off(i, N)
        H[o:o + 3, o:o + 3] = 2.0 * cfg.R
        f[o:o + 3] = -2.0 * cfg.R @ S_bar[i]

    Aeq = np.zeros((12 * N, n))
    beq = np.zeros(12 * N)
    for i in range(N):
        r = 12 * i
        Aeq[r:r + 12, _z_off(i + 1):_z_off(i + 1) + 12] = np.eye(12)
        Aeq[r:r + 12, _s_off(i, N):_s_off(i, N) + 3] = -B
        if i == 0:
            beq[r:r + 12] = A @ z_k
        else:
            Aeq[r:r + 12, _z_off(i):_z_off(i) + 12] = -A

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    for i in range(N):
        o = _s_off(i, N)
        lb[o:o + 3] = -cfg.s_max
        ub[o:o + 3] = cfg.s_max

    soc_rows = []
    lin_rows = []
    g_vec = prm.g_vec
    if cfg.relax_to_qp:
        # conservative box inside the cone: |m (a_v - g)_c| <= f_max / sqrt(3)
        r3 = cfg.f_max / (np.sqrt(3.0) * prm.m)
        for i in range(1, N + 1):
            for c in range(3):
                sel = np.zeros(n)
                sel[_z_off(i) + 6 + c] = 1.0
                lin_rows.append(cs.LinRow(sel, g_vec[c] - r3))
                lin_rows.append(cs.LinRow(-sel, -g_vec[c] - r3))
    else:
        for i in range(1, N + 1):
            F = np.zeros((3, n))
            for c in range(3):
                F[c, _z_off(i) + 6 + c] = prm.m
            soc_rows.append(cs.SocRow(F, -prm.m * g_vec, np.zeros(n), cfg.f_max))

    return cs.ConeProgram(n=n, H=H, f=f, Aeq=Aeq, beq=beq, lb=lb, ub=ub,
                          soc_rows=soc_rows, lin_rows=lin_rows)


def build_sdhocbf_mpc(z_k: np.ndarray, Z_bar: np.ndarray, S_bar: np.ndarray,
                      chains: list, cfg: MpcConfig, A: np.ndarray, B: np.ndarray,
                      prm: QuadParams) -> tuple[cs.ConeProgram, list]:
    """Tracking program plus one compensated barrier row per chain, applied at
    the first prediction step only. Returns (program, phi values)."""
    prog = build_tracking_program(z_k, Z_bar, S_bar, cfg, A, B, prm)
    U = bar.IntervalBox(np.full(3, -cfg.s_max), np.full(3, cfg.s_max))
    phis = []
    for ch in chains:
        phi = bar.compensation_phi(ch, z_k, cfg.T, U, n_samples=cfg.phi_samples,
                                   refine=cfg.phi_refine)
        coeff, rhs = bar.hocbf_constraint_row(ch, z_k, phi)
        row = np.zeros(prog.n)
        row[_s_off(0, cfg.N):_s_off(0, cfg.N) + 3] = coeff
        prog.lin_rows.append(cs.LinRow(row, rhs))
        phis.append(phi)
    return prog, phis


def _first_input(x: np.ndarray, N: int) -> np.ndarray:
    return x[_s_off(0, N):_s_off(0, N) + 3].copy()


def _shift_guess(x: np.ndarray, N: int) -> np.ndarray:
    """Shift a stacked solution one step forward (SCP warm start)."""
    out = x.copy()
    out[:12 * (N - 1)] = x[12:12 * N]
    out[12 * (N - 1):12 * N] = x[12 * (N - 1):12 * N]
    s0 = _s_off(0, N)
    out[s0:s0 + 3 * (N - 1)] = x[s0 + 3:s0 + 3 * N]
    out[s0 + 3 * (N - 1):s0 + 3 * N] = x[s0 + 3 * (N - 1):s0 + 3 * N]
    return out


def _reference_guess(Z_bar: np.ndarray, S_bar: np.ndarray, N: int) -> np.ndarray:
    return np.concatenate([Z_bar[1:].ravel(), S_bar.ravel()])


def _add_decay_rows(prog: cs.ConeProgram, incumbent: np.ndarray, z_k: np.ndarray,
                    chains: list, lam: float, steps, N: int) -> None:
    """Linearized h(z_{i+1}) - (1 - lam) h(z_i) >= 0 rows about the incumbent."""
    keep = 1.0 - lam
    for ch in chains:
        h0 = ch.h[0]
        for i in steps:
            row = np.zeros(prog.n)
            zi1_hat = incumbent[_z_off(i + 1):_z_off(i + 1) + 12]
            g1 = h0.gradient(zi1_hat)
            row[_z_off(i + 1):_z_off(i + 1) + 12] = g1
            rhs = -(h0.value(zi1_hat) - g1 @ zi1_hat)
            if i == 0:
                rhs += keep * h0.value(z_k)
            else:
                zi_hat = incumbent[_z_off(i):_z_off(i) + 12]
                g0 = h0.gradient(zi_hat)
                row[_z_off(i):_z_off(i) + 12] -= keep * g0
                rhs += keep * (h0.value(zi_hat) - g0 @ zi_hat)
            prog.lin_rows.append(cs.LinRow(row, rhs))


@dataclass
class StepDiagnostics:
    status: str
    solve_time: float
    iterations: int
    scp_iters: int = 0
    phis: list = field(default_factory=list)
    fallback: bool = False


class OuterController:
    """Stateful outer loop: holds the discretized model, the barrier chains,
    the previous solution (warm starts, fallback input), and dispatches on
    the controller kind."""

    def __init__(self, kind: str, cfg: MpcConfig, chains: list, prm: QuadParams,
                 lam: float | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown controller kind {kind!r}; valid: {KINDS}")
        if kind in ("dcbf", "dhocbf"):
            if lam is None or not (0.0 < lam <= 1.0):
                raise ValueError("dcbf/dhocbf need lambda in (0, 1]")
        self.kind = kind
        self.cfg = cfg
        self.chains = chains
        self.prm = prm
        self.lam = 1.0 if kind == "mpc_dc" else lam
        self.A_c, self.B_c = model.augmented_matrices(prm.D)
        self.A, self.B = discretize(self.A_c, self.B_c, cfg.T)
        self.prev_x: np.ndarray | None = None
        self.prev_input = np.zeros(3)
        self.infeasible_streak = 0
        self.solver_cfg = cs.SolverConfig()

    def _accept(self, sol: cs.Solution) -> bool:
        if sol.status == "optimal":
            return True
        return sol.status == "max_iter" and sol.kkt is not None \
            and sol.kkt.primal_ok(1e-6)

    def _fallback(self, diag: StepDiagnostics) -> np.ndarray:
        diag.fallback = True
        self.infeasible_streak += 1
        if self.infeasible_streak >= 2:
            raise InfeasibleRun(
                f"{self.kind}: two consecutive infeasible outer-loop solves")
        return self.prev_input.copy()

    def step(self, z_k: np.ndarray, Z_bar: np.ndarray, S_bar: np.ndarray
             ) -> tuple[np.ndarray, StepDiagnostics]:
        z_k = np.asarray(z_k, dtype=float)
        if self.kind == "sdhocbf":
            s, diag = self._step_sdhocbf(z_k, Z_bar, S_bar)
        elif self.kind == "hocbf_filter":
            s, diag = self._step_filter(z_k, Z_bar, S_bar)
        else:
            s, diag = self._step_scp(z_k, Z_bar, S_bar)
        if not diag.fallback:
            self.infeasible_streak = 0
            self.prev_input = s.copy()
        return s, diag

    def _step_sdhocbf(self, z_k, Z_bar, S_bar):
        prog, phis = build_sdhocbf_mpc(z_k, Z_bar, S_bar, self.chains, self.cfg,
                                       self.A, self.B, self.prm)
        sol = cs.solve(prog, self.solver_cfg)
        diag = StepDiagnostics(sol.status, sol.solve_time, sol.iterations, phis=phis)
        if not self._accept(sol):
            return self._fallback(diag), diag
        self.prev_x = sol.x
        return _first_input(sol.x, self.cfg.N), diag

    def _step_filter(self, z_k, Z_bar, S_bar):
        prog = build_tracking_program(z_k, Z_bar, S_bar, self.cfg, self.A,
                                      self.B, self.prm)
        sol = cs.solve(prog, self.solver_cfg)
        diag = StepDiagnostics(sol.status, sol.solve_time, sol.iterations)
        if not self._accept(sol):
            return self._fallback(diag), diag
        s_mpc = _first_input(sol.x, self.cfg.N)
        qp = cs.ConeProgram(n=3, H=2.0 * np.eye(3), f=-2.0 * s_mpc,
                            lb=np.full(3, -self.cfg.s_max),
                            ub=np.full(3, self.cfg.s_max))
        for ch in self.chains:
            coeff, rhs = bar.hocbf_constraint_row(ch, z_k, 0.0)
            qp.lin_rows.append(cs.LinRow(coeff, rhs))
        fsol = cs.solve(qp, self.solver_cfg)
        diag.solve_time += fsol.solve_time
        if not self._accept(fsol):
            return self._fallback(diag), diag
        self.prev_x = sol.x
        return fsol.x.copy(), diag

    def _step_scp(self, z_k, Z_bar, S_bar):
        N = self.cfg.N
        steps = range(N) if self.kind in ("mpc_dc", "dcbf") else \
            tuple(i for i in self.cfg.dhocbf_steps if i < N)
        incumbent = _shift_guess(self.prev_x, N) if self.prev_x is not None \
            else _reference_guess(Z_bar, S_bar, N)
        total_time = 0.0
        last_sol = None
        scp_iters = 0
        for _ in range(self.cfg.scp_max_iter):
            prog = build_tracking_program(z_k, Z_bar, S_bar, self.cfg, self.A,
                                          self.B, self.prm)
            _add_decay_rows(prog, incumbent, z_k, self.chains, self.lam, steps, N)
            sol = cs.solve(prog, self.solver_cfg)
            total_time += sol.solve_time
            scp_iters += 1
            if not self._accept(sol):
                diag = StepDiagnostics(sol.status, total_time, sol.iterations,
                                       scp_iters=scp_iters)
                return self._fallback(diag), diag
            step_norm = float(np.max(np.abs(sol.x - incumbent)))
            incumbent = sol.x
            last_sol = sol
            if step_norm < self.cfg.scp_tol:
                break
        diag = StepDiagnostics(last_sol.status, total_time, last_sol.iterations,
                               scp_iters=scp_iters)
        self.prev_x = last_sol.x
        return _first_input(last_sol.x, N), diag


def solve_step(kind: str, z_k, Z_bar, S_bar, chains, cfg: MpcConfig,
               prm: QuadParams, lam: float | None = None):
    """One-shot convenience wrapper around a fresh controller instance."""
    ctl = OuterController(kind, cfg, chains, prm, lam=lam)
    return ctl.step(np.asarray(z_k, float), Z_bar, S_bar)
