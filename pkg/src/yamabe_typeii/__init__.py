"""Numerical laboratory for type-II blow-up of the conformally flat Yamabe flow.

Modules: ``coords`` (parameters, coordinate changes, curvature), ``outer``
(outer-region barrier candidates), ``soliton`` (steady inner profile),
``barrier`` (glued sub/supersolutions), ``residual`` (evolution operators and
sign scans), ``flow`` (implicit integrators) and ``diagnostics`` (curvature
series, fits and reports).
"""

from .coords import FlowParams, make_params

__all__ = ["FlowParams", "make_params"]
__version__ = "0.1.0"
