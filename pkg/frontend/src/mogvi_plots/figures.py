"""The two figure types: decision boundaries and training curves."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .artifacts import ArtifactError, read_boundary, read_trace

#: Probability levels drawn on the boundary figure.
CONTOUR_LEVELS = (0.25, 0.5, 0.75)

#: Fixed PNG metadata so a re-render is byte identical.
_PNG_METADATA = {"Software": "mogvi-plots"}


@dataclass
class PlotSpec:
    run_dirs: list
    kind: str            # "boundary" | "curves"
    out_path: str
    dpi: int = 100

    def __post_init__(self):
        if self.kind not in ("boundary", "curves"):
            raise ValueError(f"unknown figure kind '{self.kind}'")
        if not self.run_dirs:
            raise ValueError("need at least one run directory")


def _save(fig, spec: PlotSpec) -> None:
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=spec.dpi, metadata=_PNG_METADATA)
    plt.close(fig)


def plot_boundary(spec: PlotSpec) -> None:
    """Filled predictive-probability contours with the training scatter.

    Reads boundary.csv and dataset.csv from the first run directory; the
    file is only written after everything parses.
    """
    data = read_boundary(spec.run_dirs[0])

    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    levels = [0.0, *CONTOUR_LEVELS, 1.0]
    filled = ax.contourf(data.xs, data.ys, data.probs.T, levels=levels,
                         cmap="RdBu_r", alpha=0.75)
    ax.contour(data.xs, data.ys, data.probs.T, levels=list(CONTOUR_LEVELS),
               colors="black", linewidths=[0.7, 1.4, 0.7])
    for label, marker, color in ((0, "o", "#1f3b73"), (1, "^", "#a31621")):
        mask = data.labels == label
        ax.scatter(data.points[mask, 0], data.points[mask, 1], marker=marker,
                   s=18, c=color, edgecolors="white", linewidths=0.4,
                   label=f"class {label}")
    fig.colorbar(filled, ax=ax, label="predictive probability")
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_title(Path(spec.run_dirs[0]).name)
    ax.legend(loc="best", framealpha=0.9)
    _save(fig, spec)


def plot_curves(spec: PlotSpec) -> None:
    """Two panels: ELBO with a +-1 standard-error band, and accuracy.

    One line per run directory.  Runs without a metrics.csv contribute to
    the ELBO panel only.
    """
    traces = [read_trace(d) for d in spec.run_dirs]

    fig, (ax_elbo, ax_acc) = plt.subplots(1, 2, figsize=(9.0, 3.8))
    for trace in traces:
        line, = ax_elbo.plot(trace.iterations, trace.elbo, label=trace.name)
        ax_elbo.fill_between(trace.iterations,
                             trace.elbo - trace.elbo_se,
                             trace.elbo + trace.elbo_se,
                             color=line.get_color(), alpha=0.25, linewidth=0)
        if trace.accuracy is not None:
            ax_acc.plot(trace.acc_iterations, trace.accuracy,
                        color=line.get_color(), label=trace.name)
    ax_elbo.set_xlabel("iteration")
    ax_elbo.set_ylabel("ELBO estimate")
    ax_elbo.set_title("ELBO (band: +-1 se)")
    ax_elbo.legend(loc="lower right", fontsize=8)
    ax_acc.set_xlabel("iteration")
    ax_acc.set_ylabel("test accuracy")
    ax_acc.set_title("accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    if ax_acc.lines:
        ax_acc.legend(loc="lower right", fontsize=8)
    else:
        ax_acc.text(0.5, 0.5, "no accuracy data", ha="center", va="center",
                    transform=ax_acc.transAxes, color="gray")
    fig.tight_layout()
    _save(fig, spec)


def render(spec: PlotSpec) -> None:
    if spec.kind == "boundary":
        plot_boundary(spec)
    else:
        plot_curves(spec)
