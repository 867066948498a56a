"""Figures from mogvi run artifacts; reads CSV, never computes statistics."""

from .artifacts import ArtifactError, BoundaryData, RunTrace, read_boundary, read_trace
from .figures import PlotSpec, plot_boundary, plot_curves

__version__ = "0.1.0"
