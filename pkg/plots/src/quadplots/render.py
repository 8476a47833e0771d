"""Figure rendering: trajectory, h-value, timing, and velocity plots."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle

from .io import PlotError, RunData, load_run

KINDS = ("trajectory", "hvalue", "timing", "velocity")

# fixed style so identical inputs give identical image bytes
_FIGSIZE = (6.4, 4.8)
_DPI = 200
_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


@dataclass
class PlotSpec:
    runs: list = field(default_factory=list)
    kind: str = "trajectory"
    out: str = "figure.png"

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise PlotError(f"unknown plot kind {self.kind!r}; "
                            f"valid: {', '.join(KINDS)}")
        if not self.runs:
            raise PlotError("at least one run directory is required")


def render(spec: PlotSpec) -> Path:
    spec.validate()
    data = [load_run(d) for d in spec.runs]
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    try:
        _DRAW[spec.kind](ax, data)
        out = Path(spec.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, dpi=_DPI, metadata={"Software": None})
    finally:
        plt.close(fig)
    return Path(spec.out)


def _label(run: RunData) -> str:
    if run.geometry and run.geometry.get("controller"):
        ctl = run.geometry["controller"]
        return ctl if ctl == run.label else f"{run.label} ({ctl})"
    return run.label


def _draw_trajectory(ax, data) -> None:
    geo = next((r.geometry for r in data if r.geometry), None)
    if geo:
        ref = np.array(geo["reference_xyz"])
        ax.plot(ref[:, 0], ref[:, 1], "k--", lw=1.0, label="reference")
        for obs in geo["obstacles"]:
            cx, cy = obs["center"][:2]
            ax.add_patch(Circle((cx, cy), obs["radius"], facecolor="0.85",
                                edgecolor="0.3", zorder=0))
    for i, run in enumerate(data):
        x, y = run.inner["px"], run.inner["py"]
        color = _COLORS[i % len(_COLORS)]
        ax.plot(x, y, color=color, lw=1.4, label=_label(run))
        ax.plot(x[0], y[0], "o", color=color, ms=6)
        if len(x) > 20:  # direction arrow a short way along the path
            k = max(1, len(x) // 20)
            ax.annotate("", xy=(x[k], y[k]), xytext=(x[0], y[0]),
                        arrowprops=dict(arrowstyle="-|>", color=color))
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="upper right", fontsize=8)


def _draw_hvalue(ax, data) -> None:
    for i, run in enumerate(data):
        t = run.outer["t"]
        color = _COLORS[i % len(_COLORS)]
        ax.plot(t, run.outer["h1"], color=color, lw=1.2, label=_label(run))
        ax.plot(t, run.outer["h2"], color=color, lw=1.2, ls="--")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("barrier value")
    ax.legend(loc="upper right", fontsize=8)


def _draw_timing(ax, data) -> None:
    for i, run in enumerate(data):
        ax.plot(run.outer["t"], run.outer["solve_ms"],
                color=_COLORS[i % len(_COLORS)], lw=1.2, label=_label(run))
    ax.set_xlabel("t [s]")
    ax.set_ylabel("solve time [ms]")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)


def _draw_velocity(ax, data) -> None:
    for i, run in enumerate(data):
        v = np.hypot(np.hypot(run.inner["vx"], run.inner["vy"]),
                     run.inner["vz"])
        ax.plot(run.inner["t"], v, color=_COLORS[i % len(_COLORS)], lw=1.2,
                label=_label(run))
    ax.set_xlabel("t [s]")
    ax.set_ylabel("speed [m/s]")
    ax.legend(loc="upper right", fontsize=8)


_DRAW = {
    "trajectory": _draw_trajectory,
    "hvalue": _draw_hvalue,
    "timing": _draw_timing,
    "velocity": _draw_velocity,
}
