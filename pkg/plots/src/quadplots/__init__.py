"""Publication-style figures from simulation run directories.

Consumes only the CSV/JSON artifacts a run writes (log.csv, outer.csv,
geometry.json); never imports the simulation package.
"""

from .render import KINDS, PlotError, PlotSpec, render

__all__ = ["KINDS", "PlotError", "PlotSpec", "render"]
