"""Run-directory readers with strict schema checks.

Any missing file or header mismatch raises PlotError naming the offending
file and column, so batch scripts fail loudly instead of drawing garbage.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

INNER_COLUMNS = ("t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,"
                 "fz,taux,tauy,tauz").split(",")
OUTER_COLUMNS = "t,h1,h2,phi1,phi2,sx,sy,sz,status,solve_ms".split(",")


class PlotError(Exception):
    pass


@dataclass
class RunData:
    label: str
    inner: dict          # column name -> float array
    outer: dict          # column name -> float array (status -> str list)
    geometry: dict | None


def _read_csv(path: Path, columns: list[str], text_cols=()) -> dict:
    if not path.exists():
        raise PlotError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PlotError(f"{path}: empty file") from None
        if header != columns:
            for got, want in zip(header, columns):
                if got != want:
                    raise PlotError(
                        f"{path}: expected column {want!r}, found {got!r}")
            raise PlotError(f"{path}: expected {len(columns)} columns, "
                            f"found {len(header)}")
        rows = list(reader)
    out = {}
    for i, name in enumerate(columns):
        vals = [r[i] for r in rows]
        if name in text_cols:
            out[name] = vals
        else:
            try:
                out[name] = np.array([float(v) for v in vals])
            except ValueError as e:
                raise PlotError(f"{path}: column {name!r}: {e}") from None
    return out


def load_run(rundir) -> RunData:
    rundir = Path(rundir)
    if not rundir.is_dir():
        raise PlotError(f"{rundir}: not a directory")
    inner = _read_csv(rundir / "log.csv", INNER_COLUMNS)
    outer = _read_csv(rundir / "outer.csv", OUTER_COLUMNS, text_cols=("status",))
    geometry = None
    geo_path = rundir / "geometry.json"
    if geo_path.exists():
        try:
            geometry = json.loads(geo_path.read_text())
        except json.JSONDecodeError as e:
            raise PlotError(f"{geo_path}: {e}") from None
    return RunData(label=rundir.name, inner=inner, outer=outer,
                   geometry=geometry)
