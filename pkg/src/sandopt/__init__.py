"""Structural optimization of prismatic sandwich beams in 2D.

Two pipelines share one finite-element core: density-based topology
optimization of a clamped beam domain (stress minimization or
eigenfrequency maximization, driven by MMA) and multi-objective sizing
optimization of four conventional sandwich core types (driven by NSGA-II
on a frame model).
"""

__version__ = "0.1.0"

from . import cli, fem2d, mma, nsga2, sandwich, topopt  # noqa: F401
