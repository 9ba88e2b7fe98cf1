"""Discrete Föppl–von-Kármán energy of a conically clamped sector sheet.

Modules:

* :mod:`fvkcone.grid`: sector parameters, proof scales and the polar grid;
* :mod:`fvkcone.fields`: nodal fields and finite-difference calculus;
* :mod:`fvkcone.analytic`: cone, regularized competitor and test function;
* :mod:`fvkcone.energy`: discrete energy with exact gradient;
* :mod:`fvkcone.minimize`: preconditioned L-BFGS and convexity certificates;
* :mod:`fvkcone.diagnostics`: pairings, dual norms, slope curves, certificates;
* :mod:`fvkcone.sweep`: h-sweeps and the scaling fit;
* :mod:`fvkcone.cli`: the ``fvkcone`` command.
"""

__version__ = "0.1.0"

from .grid import PolarGrid, SectorSpec, SpecError, GridError, build_grid, build_spec  # noqa: E402
from .energy import EnergyBreakdown, FvkEnergy  # noqa: E402
from .minimize import MinimizeOptions, minimize  # noqa: E402

__all__ = ["PolarGrid", "SectorSpec", "SpecError", "GridError", "build_grid", "build_spec",
           "EnergyBreakdown", "FvkEnergy", "MinimizeOptions", "minimize", "__version__"]
