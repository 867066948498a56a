"""CSV readers for the run artifacts the training harness writes.

The files are plain CSV with fixed headers:

    boundary.csv  x,y,prob                     (grid of predictive probs)
    dataset.csv   x0,x1,...,label              (training scatter)
    run.csv       iter,elbo,elbo_se,...        (training trace)
    metrics.csv   iter,accuracy                (optional, classifiers only)

Everything is validated here so the figure code can assume clean arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ArtifactError(ValueError):
    """A required artifact is missing, empty, or malformed."""


def _read_csv(path: Path, required: list[str]) -> tuple[list[str], np.ndarray]:
    if not path.exists():
        raise ArtifactError(f"{path}: no such file")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ArtifactError(f"{path}: empty file")
    header = rows[0]
    for col in required:
        if col not in header:
            raise ArtifactError(f"{path}: missing column '{col}'")
    if len(rows) < 2:
        raise ArtifactError(f"{path}: header only, no data rows")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]])
    except ValueError as e:
        raise ArtifactError(f"{path}: non-numeric cell ({e})") from e
    if data.shape[1] != len(header):
        raise ArtifactError(f"{path}: ragged rows")
    return header, data


@dataclass
class BoundaryData:
    """Predictive-probability grid plus the training scatter behind it."""

    xs: np.ndarray        # sorted unique grid x
    ys: np.ndarray        # sorted unique grid y
    probs: np.ndarray     # (len(xs), len(ys))
    points: np.ndarray    # (n, 2) training features
    labels: np.ndarray    # (n,) binary labels


def read_boundary(run_dir) -> BoundaryData:
    run_dir = Path(run_dir)
    header, grid = _read_csv(run_dir / "boundary.csv", ["x", "y", "prob"])
    cols = {name: header.index(name) for name in ("x", "y", "prob")}
    xs = np.unique(grid[:, cols["x"]])
    ys = np.unique(grid[:, cols["y"]])
    if xs.size * ys.size != grid.shape[0]:
        raise ArtifactError(f"{run_dir}/boundary.csv: not a full tensor grid")
    # Rows were written x-major; reshape recovers the grid.
    order = np.lexsort((grid[:, cols["y"]], grid[:, cols["x"]]))
    probs = grid[order, cols["prob"]].reshape(xs.size, ys.size)

    d_header, d_data = _read_csv(run_dir / "dataset.csv", ["x0", "x1", "label"])
    points = d_data[:, [d_header.index("x0"), d_header.index("x1")]]
    labels = d_data[:, d_header.index("label")].astype(int)
    return BoundaryData(xs, ys, probs, points, labels)


@dataclass
class RunTrace:
    """ELBO trace (with standard errors) and optional accuracy trace."""

    name: str
    iterations: np.ndarray
    elbo: np.ndarray
    elbo_se: np.ndarray
    acc_iterations: np.ndarray | None = None
    accuracy: np.ndarray | None = None


def read_trace(run_dir) -> RunTrace:
    run_dir = Path(run_dir)
    header, data = _read_csv(run_dir / "run.csv", ["iter", "elbo", "elbo_se"])
    idx = {name: header.index(name) for name in ("iter", "elbo", "elbo_se")}
    trace = RunTrace(
        name=run_dir.name,
        iterations=data[:, idx["iter"]],
        elbo=data[:, idx["elbo"]],
        elbo_se=data[:, idx["elbo_se"]],
    )
    metrics = run_dir / "metrics.csv"
    if metrics.exists():
        m_header, m_data = _read_csv(metrics, ["iter", "accuracy"])
        trace.acc_iterations = m_data[:, m_header.index("iter")]
        trace.accuracy = m_data[:, m_header.index("accuracy")]
    return trace
