"""Scenario loading, the two-rate closed loop, logging, and metrics.

Outer loop (default 10 Hz): measure p, v, solve the configured controller,
hold s_v. Inner loop (default 1 kHz): propagate the desired augmented state
under the held input, convert through flatness, run the attitude law, step
the plant one RK4 step with constant thrust/torque.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import attitude as att
from . import barrier as bar
from . import flatness as flat
from . import model, mpc, quat, sim

INNER_CSV_HEADER = "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,fz,taux,tauy,tauz"
OUTER_CSV_HEADER = "t,h1,h2,phi1,phi2,sx,sy,sz,status,solve_ms"

F_Z_MIN = 0.01  # strict positivity clamp on thrust


class ScenarioError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid scenario: " + "; ".join(self.problems))


@dataclass
class BarrierSpec:
    kind: str
    center: list
    radius: float


@dataclass
class Reference:
    """Analytic flat reference: circle (with linear yaw) or hover point."""

    kind: str
    radius: float = 2.0
    omega: float = 0.5
    altitude: float = 1.0
    yaw_rate: float = 0.5
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def flat(self, t: float) -> flat.FlatOutput:
        if self.kind == "hover":
            return flat.FlatOutput(self.point, np.zeros(3), np.zeros(3),
                                   np.zeros(3), np.zeros(3))
        r, w = self.radius, self.omega
        c, s = np.cos(w * t), np.sin(w * t)
        p = np.array([r * c, r * s, self.altitude])
        v = np.array([-r * w * s, r * w * c, 0.0])
        a = np.array([-r * w ** 2 * c, -r * w ** 2 * s, 0.0])
        j = np.array([r * w ** 3 * s, -r * w ** 3 * c, 0.0])
        sn = np.array([r * w ** 4 * c, r * w ** 4 * s, 0.0])
        return flat.FlatOutput(p, v, a, j, sn, psi=self.yaw_rate * t,
                               dpsi=self.yaw_rate)

    def augmented(self, t: float, D: np.ndarray):
        return flat.reference_to_augmented(self.flat(t), D)


@dataclass
class ScenarioConfig:
    quad: sim.QuadParams
    mpc: mpc.MpcConfig
    kind: str
    barrier_gain: float
    lam: float | None
    barriers: list
    reference: Reference
    gains: att.AttitudeGains
    duration: float
    inner_dt: float
    outer_T: float
    x0: sim.QuadState

    def build_chains(self) -> list:
        A_c, B_c = model.augmented_matrices(self.quad.D)
        chains = []
        for b in self.barriers:
            h0 = bar.barrier_from_spec(b.kind, b.center, b.radius)
            chains.append(bar.build_chain(h0, [self.barrier_gain] * 4, A_c, B_c))
        return chains

    def initial_augmented(self) -> np.ndarray:
        zr, _ = self.reference.augmented(0.0, self.quad.D)
        return np.concatenate([self.x0.p, self.x0.v, zr.a_v, zr.j_v])


def _vec(d, key, n, problems, default=None):
    v = d.get(key, default)
    if v is None or len(v) != n:
        problems.append(f"{key} must be a {n}-vector")
        return np.zeros(n)
    return np.asarray(v, dtype=float)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    problems = []
    q = data.get("quad", {})
    quad = None
    try:
        quad = sim.QuadParams(m=q.get("m", 0.468),
                              J=q.get("J", [4.856e-3, 4.856e-3, 8.801e-3]),
                              D=q.get("D", [0.25] * 3),
                              f_max=q.get("f_max", 12.0))
    except ValueError as e:
        problems.append(str(e))
        quad = sim.QuadParams()
    m = data.get("mpc", {})
    q_diag = _vec(m, "q_diag", 12, problems, [100.0] * 3 + [1.0] * 9)
    cfg = mpc.MpcConfig(N=m.get("N", 20), T=m.get("T_s", 0.1),
                        Q=np.diag(q_diag),
                        P=np.diag(q_diag) * m.get("p_terminal_scale", 10.0),
                        R=np.diag(_vec(m, "r_diag", 3, problems, [0.01] * 3)),
                        s_max=m.get("s_max", 40.0),
                        f_max=quad.f_max,
                        relax_to_qp=m.get("relax_to_qp", False),
                        phi_samples=m.get("phi_samples", 11),
                        phi_refine=m.get("phi_refine", True))
    c = data.get("controller", {})
    kind = c.get("kind", "sdhocbf")
    if kind not in mpc.KINDS:
        problems.append(f"unknown controller kind {kind!r}; valid: {mpc.KINDS}")
    barrier_gain = float(c.get("p", 5.0))
    lam = c.get("lam")
    if kind in ("dcbf", "dhocbf"):
        if lam is None or not (0.0 < lam <= 1.0):
            problems.append("dcbf/dhocbf require lam in (0, 1]")
    barriers = []
    for b in data.get("barriers", []):
        try:
            barriers.append(BarrierSpec(b["kind"], list(b["center"]), float(b["radius"])))
            bar.barrier_from_spec(b["kind"], b["center"], b["radius"])
        except (KeyError, ValueError) as e:
            problems.append(f"bad barrier entry: {e}")
    r = data.get("reference", {})
    rkind = r.get("type", "circle")
    if rkind == "hover":
        ref = Reference("hover", point=_vec(r, "point_m", 3, problems, [0.0, 0.0, 1.0]))
    elif rkind == "circle":
        ref = Reference("circle", radius=r.get("radius_m", 2.0),
                        omega=r.get("omega_rad_s", 0.5),
                        altitude=r.get("altitude_m", 1.0),
                        yaw_rate=r.get("yaw_rate_rad_s", 0.5))
    else:
        problems.append(f"unknown reference type {rkind!r}")
        ref = Reference("hover")
    a = data.get("attitude", {})
    try:
        gains = att.AttitudeGains(a.get("k_p_xy", 24.0), a.get("k_p_z", 0.7),
                                  _vec(a, "k_d", 3, problems, [0.8, 0.8, 0.3]))
    except ValueError as e:
        problems.append(str(e))
        gains = att.AttitudeGains()
    s = data.get("sim", {})
    duration = float(s.get("duration_s", 20.0))
    inner_dt = float(s.get("inner_dt_s", 1e-3))
    outer_T = float(s.get("outer_T_s", cfg.T))
    if inner_dt <= 0 or duration <= 0:
        problems.append("duration and inner_dt must be positive")
    else:
        ratio = outer_T / inner_dt
        if abs(ratio - round(ratio)) > 1e-9:
            problems.append("outer_T_s must be an integer multiple of inner_dt_s")
    if abs(outer_T - cfg.T) > 1e-12:
        problems.append("outer_T_s must equal mpc.T_s")
    ini = data.get("initial", {})
    q_xyzw = _vec(ini, "q_xyzw", 4, problems, [0.0, 0.0, 0.0, 1.0])
    q_wxyz = np.array([q_xyzw[3], q_xyzw[0], q_xyzw[1], q_xyzw[2]])
    if abs(np.linalg.norm(q_wxyz) - 1.0) > 1e-6:
        problems.append("initial quaternion must have unit norm")
    else:
        q_wxyz = quat.normalize(q_wxyz)
    x0 = sim.QuadState(_vec(ini, "p", 3, problems, [0.0, 0.0, 1.0]),
                       _vec(ini, "v", 3, problems, [0.0] * 3),
                       q_wxyz,
                       _vec(ini, "omega", 3, problems, [0.0] * 3))
    out = ScenarioConfig(quad, cfg, kind, barrier_gain, lam, barriers, ref,
                         gains, duration, inner_dt, outer_T, x0)
    if not problems:
        z0 = out.initial_augmented()
        try:
            for bi, ch in enumerate(out.build_chains()):
                vals = ch.values(z0)
                for i, v in enumerate(vals):
                    if v < 0:
                        problems.append(
                            f"initial state violates barrier {bi} chain level {i}: "
                            f"h_{i}(z0) = {v:.6g} < 0")
        except bar.ChainConfigError as e:
            problems.append(str(e))
    if problems:
        raise ScenarioError(problems)
    return out


def load_scenario(path) -> ScenarioConfig:
    if not Path(path).exists():
        raise ScenarioError([f"scenario file not found: {path}"])
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ScenarioError([f"TOML parse error: {e}"])
    return scenario_from_dict(data)


def _toml_val(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_val(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def save_scenario(cfg: ScenarioConfig, path) -> None:
    """Write the config back out as TOML (round-trips through load_scenario)."""
    c = cfg
    lines = ["[quad]"]
    for k, v in (("m", c.quad.m), ("J", c.quad.J), ("D", c.quad.D),
                 ("f_max", c.quad.f_max)):
        lines.append(f"{k} = {_toml_val(v)}")
    lines += ["", "[mpc]",
              f"N = {c.mpc.N}", f"T_s = {_toml_val(c.mpc.T)}",
              f"q_diag = {_toml_val(np.diag(c.mpc.Q))}",
              f"p_terminal_scale = {_toml_val(c.mpc.P[0, 0] / c.mpc.Q[0, 0])}",
              f"r_diag = {_toml_val(np.diag(c.mpc.R))}",
              f"s_max = {_toml_val(c.mpc.s_max)}",
              f"relax_to_qp = {_toml_val(c.mpc.relax_to_qp)}",
              f"phi_samples = {c.mpc.phi_samples}",
              f"phi_refine = {_toml_val(c.mpc.phi_refine)}",
              "", "[controller]", f"kind = {_toml_val(c.kind)}",
              f"p = {_toml_val(c.barrier_gain)}"]
    if c.lam is not None:
        lines.append(f"lam = {_toml_val(c.lam)}")
    for b in c.barriers:
        lines += ["", "[[barriers]]", f"kind = {_toml_val(b.kind)}",
                  f"center = {_toml_val(b.center)}",
                  f"radius = {_toml_val(b.radius)}"]
    r = c.reference
    lines += ["", "[reference]", f"type = {_toml_val(r.kind)}"]
    if r.kind == "hover":
        lines.append(f"point_m = {_toml_val(r.point)}")
    else:
        lines += [f"radius_m = {_toml_val(r.radius)}",
                  f"omega_rad_s = {_toml_val(r.omega)}",
                  f"altitude_m = {_toml_val(r.altitude)}",
                  f"yaw_rate_rad_s = {_toml_val(r.yaw_rate)}"]
    lines += ["", "[attitude]", f"k_p_xy = {_toml_val(c.gains.k_p_xy)}",
              f"k_p_z = {_toml_val(c.gains.k_p_z)}",
              f"k_d = {_toml_val(c.gains.K_d)}",
              "", "[sim]", f"duration_s = {_toml_val(c.duration)}",
              f"inner_dt_s = {_toml_val(c.inner_dt)}",
              f"outer_T_s = {_toml_val(c.outer_T)}",
              "", "[initial]", f"p = {_toml_val(c.x0.p)}",
              f"v = {_toml_val(c.x0.v)}",
              f"q_xyzw = {_toml_val(np.roll(c.x0.q, -1))}",
              f"omega = {_toml_val(c.x0.omega)}"]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class SimLog:
    inner: np.ndarray      # rows: t, p(3), v(3), q(4), omega(3), f_z, tau(3)
    outer_t: np.ndarray
    outer_h: np.ndarray    # (n_outer, n_barriers) chain-root values at z_k
    outer_phi: np.ndarray
    outer_s: np.ndarray
    outer_status: list
    outer_solve_time: np.ndarray
    failed: bool = False
    failure_reason: str = ""
    thrust_clamped: int = 0


def run_simulation(cfg: ScenarioConfig) -> SimLog:
    n_inner = int(round(cfg.outer_T / cfg.inner_dt))
    n_outer = int(round(cfg.duration / cfg.outer_T))
    chains = cfg.build_chains()
    ctl = mpc.OuterController(cfg.kind, cfg.mpc, chains, cfg.quad, lam=cfg.lam)
    state = cfg.x0
    z_virtual = cfg.initial_augmented()[6:12]  # internal (a_v, j_v)
    dt = cfg.inner_dt
    T = cfg.outer_T
    N = cfg.mpc.N

    inner_rows = []
    outer_t, outer_h, outer_phi, outer_s = [], [], [], []
    outer_status, outer_time = [], []
    failed = False
    reason = ""
    clamped = 0

    for k in range(n_outer):
        t_k = k * T
        z_k = np.concatenate([state.p, state.v, z_virtual])
        Z_bar = np.empty((N + 1, 12))
        S_bar = np.empty((N, 3))
        for i in range(N + 1):
            zr, sr = cfg.reference.augmented(t_k + i * cfg.mpc.T, cfg.quad.D)
            Z_bar[i] = zr.as_vector()
            if i < N:
                S_bar[i] = sr
        try:
            s_star, diag = ctl.step(z_k, Z_bar, S_bar)
        except (mpc.InfeasibleRun, FloatingPointError) as e:
            failed, reason = True, str(e)
            break
        outer_t.append(t_k)
        outer_h.append([ch.h[0].value(z_k) for ch in chains])
        outer_phi.append(list(diag.phis) if diag.phis else [0.0] * len(chains))
        outer_s.append(s_star.copy())
        outer_status.append(diag.status + ("/fallback" if diag.fallback else ""))
        outer_time.append(diag.solve_time)

        a_v_k = z_virtual[:3].copy()
        j_v_k = z_virtual[3:].copy()
        try:
            for n in range(n_inner):
                t_n = t_k + n * dt
                sig = n * dt
                # attitude references at the step start, thrust magnitude at
                # the step midpoint (input is held over the RK4 step)
                a_v_n = a_v_k + sig * j_v_k + 0.5 * sig * sig * s_star
                j_v_n = j_v_k + sig * s_star
                fl = cfg.reference.flat(t_n)
                _, q_d = flat.desired_attitude(a_v_n, fl.psi, cfg.quad)
                omega_d, domega_d = flat.desired_rates(
                    a_v_n, j_v_n, s_star, fl.psi, fl.dpsi, fl.ddpsi, cfg.quad)
                sig_m = sig + 0.5 * dt
                a_v_m = a_v_k + sig_m * j_v_k + 0.5 * sig_m * sig_m * s_star
                f_z = cfg.quad.m * np.linalg.norm(a_v_m - cfg.quad.g_vec)
                err = att.attitude_errors(q_d, state.q)
                tau = att.torque_command(err, state.omega, omega_d, domega_d,
                                         cfg.gains, cfg.quad.J)
                u = sim.clamp_input(sim.ControlInput(f_z, tau), cfg.quad, F_Z_MIN)
                if u.f_z != f_z:
                    clamped += 1
                inner_rows.append(np.concatenate([
                    [t_n], state.p, state.v, state.q, state.omega,
                    [u.f_z], u.tau]))
                state = sim.integrate_step(state, u, cfg.quad, dt)
        except FloatingPointError as e:
            failed, reason = True, f"plant blow-up: {e}"
            break
        # virtual states follow the model flow under the held input
        z_virtual = np.concatenate([
            a_v_k + T * j_v_k + 0.5 * T * T * s_star,
            j_v_k + T * s_star])

    return SimLog(np.array(inner_rows) if inner_rows else np.zeros((0, 18)),
                  np.array(outer_t), np.array(outer_h), np.array(outer_phi),
                  np.array(outer_s), outer_status, np.array(outer_time),
                  failed, reason, clamped)


@dataclass
class Metrics:
    min_h: list
    rms_pos_err: float
    max_solve_time: float
    mean_solve_time: float
    gap_passed: bool
    infeasible_count: int
    tracking_cost: float
    failed: bool
    thrust_clamped: int

    def as_dict(self) -> dict:
        return {
            "min_h": [float(v) for v in self.min_h],
            "rms_pos_err_m": float(self.rms_pos_err),
            "max_solve_time_s": float(self.max_solve_time),
            "mean_solve_time_s": float(self.mean_solve_time),
            "gap_passed": bool(self.gap_passed),
            "infeasible_count": int(self.infeasible_count),
            "tracking_cost": float(self.tracking_cost),
            "failed": bool(self.failed),
            "thrust_clamped": int(self.thrust_clamped),
        }


def barrier_values_at_positions(cfg: ScenarioConfig, P: np.ndarray) -> np.ndarray:
    """h0 per barrier evaluated at an (n, 3) array of positions."""
    out = np.empty((P.shape[0], len(cfg.barriers)))
    for j, b in enumerate(cfg.barriers):
        h0 = bar.barrier_from_spec(b.kind, b.center, b.radius)
        Z = np.zeros((P.shape[0], 12))
        Z[:, :3] = P
        out[:, j] = np.einsum("ni,ij,nj->n", Z, h0.Pi, Z) + Z @ h0.pi + h0.c
    return out


def _gap_geometry(cfg: ScenarioConfig):
    """Gap segment between two cylinder obstacles, or None."""
    if len(cfg.barriers) != 2:
        return None
    b1, b2 = cfg.barriers
    if b1.kind != "cylinder_z" or b2.kind != "cylinder_z":
        return None
    c1 = np.asarray(b1.center, dtype=float)
    c2 = np.asarray(b2.center, dtype=float)
    d = np.linalg.norm(c2 - c1)
    width = d - b1.radius - b2.radius
    if width <= 0:
        return None
    u = (c2 - c1) / d
    lo = b1.radius
    hi = d - b2.radius
    return c1, u, lo, hi


def compute_metrics(log: SimLog, cfg: ScenarioConfig) -> Metrics:
    t = log.inner[:, 0]
    P = log.inner[:, 1:4]
    hvals = barrier_values_at_positions(cfg, P) if len(cfg.barriers) else np.zeros((len(t), 0))
    min_h = hvals.min(axis=0).tolist() if hvals.size else []

    post = t >= 2.0
    if np.any(post):
        ref_p = np.array([cfg.reference.flat(ti).p for ti in t[post]])
        rms = float(np.sqrt(np.mean(np.sum((P[post] - ref_p) ** 2, axis=1))))
    else:
        rms = float("nan")

    gap_passed = False
    geo = _gap_geometry(cfg)
    if geo is not None and len(t):
        c1, u, lo, hi = geo
        rel = P[:, :2] - c1[None, :]
        along = rel @ u
        perp = np.abs(rel @ np.array([-u[1], u[0]]))
        alt_ok = np.abs(P[:, 2] - cfg.reference.altitude) <= 0.25 \
            if cfg.reference.kind == "circle" else np.ones(len(t), bool)
        in_gap = (along >= lo) & (along <= hi) & (perp <= 0.15) & alt_ok
        if hvals.size:
            in_gap &= np.all(hvals >= 0.0, axis=1)
        gap_passed = bool(np.any(in_gap))

    cost = 0.0
    for k, t_k in enumerate(log.outer_t):
        zr, sr = cfg.reference.augmented(t_k, cfg.quad.D)
        row = log.inner[int(round(t_k / cfg.inner_dt))]
        z_meas = np.concatenate([row[1:4], row[4:7]])
        dz = z_meas - zr.as_vector()[:6]
        cost += float(dz @ cfg.mpc.Q[:6, :6] @ dz)
        ds = log.outer_s[k] - sr
        cost += float(ds @ cfg.mpc.R @ ds)

    infeas = sum(1 for s in log.outer_status if "fallback" in s or s == "infeasible")
    solve = log.outer_solve_time
    return Metrics(min_h, rms,
                   float(solve.max()) if len(solve) else 0.0,
                   float(solve.mean()) if len(solve) else 0.0,
                   gap_passed, infeas, cost, log.failed, log.thrust_clamped)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def write_logs(log: SimLog, cfg: ScenarioConfig, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    # geometry sidecar so plotting tools need only the run directory
    ts = np.linspace(0.0, cfg.duration, 401)
    geometry = {
        "controller": cfg.kind,
        "obstacles": [{"kind": b.kind,
                       "center": [float(c) for c in b.center],
                       "radius": float(b.radius)} for b in cfg.barriers],
        "reference_xyz": [[round(float(c), 9) for c in cfg.reference.flat(t).p]
                          for t in ts],
    }
    with open(outdir / "geometry.json", "w") as fh:
        json.dump(geometry, fh)
        fh.write("\n")
    with open(outdir / "log.csv", "w") as fh:
        fh.write(INNER_CSV_HEADER + "\n")
        for row in log.inner:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    with open(outdir / "outer.csv", "w") as fh:
        fh.write(OUTER_CSV_HEADER + "\n")
        for k in range(len(log.outer_t)):
            h = list(log.outer_h[k]) if log.outer_h.size else []
            phi = list(log.outer_phi[k]) if log.outer_phi.size else []
            h = (h + [0.0] * 2)[:2]
            phi = (phi + [0.0] * 2)[:2]
            vals = ([log.outer_t[k]] + h + phi + list(log.outer_s[k])
                    + [log.outer_status[k], 1000.0 * log.outer_solve_time[k]])
            fh.write(",".join(v if isinstance(v, str) else _fmt(float(v))
                              for v in vals) + "\n")


def write_metrics(metrics: Metrics, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "metrics.json", "w") as fh:
        json.dump(metrics.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
