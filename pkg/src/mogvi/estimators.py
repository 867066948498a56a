"""Monte-Carlo ELBO and gradient estimators.

The variance-reduced mixture estimators replace every mixture draw with
per-component Gaussian draws; the sampled conditional entropy and its
analytic counterpart are both kept, and the same draws feed the sampled
entropy and the cross-entropy term, so their fluctuations cancel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distributions import (
    DiagGaussian,
    MixturePosterior,
    RngStream,
    gauss_entropy,
    gauss_log_pdf,
    mog_log_pdf,
)
from .models import TargetModel, sample_posterior


@dataclass
class EstimatorReport:
    """Value of an estimator plus the per-sample values behind it."""

    value: float
    per_sample: np.ndarray
    n_samples: int = 0

    def __post_init__(self):
        self.per_sample = np.atleast_1d(np.asarray(self.per_sample, dtype=float))
        if self.n_samples == 0:
            self.n_samples = self.per_sample.size
        if self.n_samples < 1:
            raise ValueError("need at least one sample")

    @property
    def sample_variance(self) -> float:
        if self.per_sample.size < 2:
            return 0.0
        return float(np.var(self.per_sample, ddof=1))

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.sample_variance / self.per_sample.size))


def elbo_naive(q: DiagGaussian | MixturePosterior, model: TargetModel,
               n_samples: int, rng: RngStream) -> EstimatorReport:
    """Mean of log_joint(z) - log q(z) over draws z ~ q."""
    if n_samples < 1:
        raise ValueError("need n_samples >= 1")
    zs = sample_posterior(q, n_samples, rng)
    if isinstance(q, DiagGaussian):
        log_q = gauss_log_pdf(q, zs)
    else:
        log_q = mog_log_pdf(q, zs)
    vals = model.log_joint(zs) - log_q
    return EstimatorReport(float(np.mean(vals)), vals)


@dataclass
class ScoreFunctionGrad:
    """Score-function ELBO gradient in the (mu, log sigma^2) chart."""

    grad_mean: np.ndarray
    grad_log_var: np.ndarray
    report: EstimatorReport


def score_function_grad(q: DiagGaussian, model: TargetModel, n_samples: int,
                        rng: RngStream) -> ScoreFunctionGrad:
    """Unbiased grad of the ELBO via (log p - log q) * grad_phi log q."""
    if n_samples < 2:
        raise ValueError("need n_samples >= 2")
    zs = sample_posterior(q, n_samples, rng)
    log_q = gauss_log_pdf(q, zs)
    weights = model.log_joint(zs) - log_q  # (S,)
    centered = (zs - q.mean) / q.variance  # d log q / d mu
    dlogvar = -0.5 + 0.5 * (zs - q.mean) ** 2 / q.variance
    grad_mean = np.mean(weights[:, None] * centered, axis=0)
    grad_log_var = np.mean(weights[:, None] * dlogvar, axis=0)
    return ScoreFunctionGrad(grad_mean, grad_log_var,
                             EstimatorReport(float(np.mean(weights)), weights))


def _per_component_draws(q: MixturePosterior, n_per_component: int,
                         rng: RngStream,
                         component_rngs: list[RngStream] | None = None) -> np.ndarray:
    """(K, S, d) draws; component c uses rng.child(c) unless overridden."""
    if component_rngs is None:
        component_rngs = [rng.child(c) for c in range(q.k)]
    out = np.empty((q.k, n_per_component, q.dim))
    for c, comp in enumerate(q.components):
        eps = component_rngs[c].standard_normal((n_per_component, q.dim))
        out[c] = comp.mean + np.sqrt(comp.variance) * eps
    return out


def entropy_trick(q: MixturePosterior, n_per_component: int,
                  rng: RngStream,
                  component_rngs: list[RngStream] | None = None) -> EstimatorReport:
    """Variance-reduced mixture entropy.

    H[z] ~= sum_c pi_c * mean_s [H_c + log N_c(z_cs) - log q(z_cs)],
    z_cs ~ component c.  For K=1 the bracket is the exact entropy for
    every sample, so the estimator has zero variance.
    """
    if n_per_component < 1:
        raise ValueError("need n_per_component >= 1")
    zs = _per_component_draws(q, n_per_component, rng, component_rngs)
    w = q.weights
    h_c = np.array([gauss_entropy(c) for c in q.components])
    per_sample = np.zeros(n_per_component)
    for c, comp in enumerate(q.components):
        term = h_c[c] + gauss_log_pdf(comp, zs[c]) - mog_log_pdf(q, zs[c])
        per_sample += w[c] * term
    return EstimatorReport(float(np.mean(per_sample)), per_sample)


def gauss_kl(a: DiagGaussian, mean_b: np.ndarray, var_b: np.ndarray) -> float:
    """KL(a || N(mean_b, diag var_b)) in closed form."""
    return float(0.5 * np.sum(
        np.log(var_b / a.variance)
        + (a.variance + (a.mean - mean_b) ** 2) / var_b
        - 1.0
    ))


def elbo_entropy_trick(q: MixturePosterior, model: TargetModel,
                       n_per_component: int, rng: RngStream,
                       component_rngs: list[RngStream] | None = None) -> EstimatorReport:
    """Per-component ELBO decomposition with the entropy control variate.

    L ~= sum_c pi_c * mean_s [ ell(z_cs) - KL(N_c || prior)
                               + log N_c(z_cs) - log q(z_cs) ],
    every z_cs drawn from component c alone (no mixture sampling), and the
    prior KL analytic.
    """
    if n_per_component < 1:
        raise ValueError("need n_per_component >= 1")
    zs = _per_component_draws(q, n_per_component, rng, component_rngs)
    w = q.weights
    prior_var = np.full(q.dim, 1.0 / model.lam)
    per_sample = np.zeros(n_per_component)
    for c, comp in enumerate(q.components):
        kl = gauss_kl(comp, np.zeros(q.dim), prior_var)
        term = (model.log_lik(zs[c]) - kl
                + gauss_log_pdf(comp, zs[c]) - mog_log_pdf(q, zs[c]))
        per_sample += w[c] * term
    return EstimatorReport(float(np.mean(per_sample)), per_sample)


@dataclass
class BenchCell:
    estimator: str
    problem: str
    n_samples: int
    replicate: int
    value: float


def variance_bench(estimators: dict, problems: dict, sample_grid: list[int],
                   n_replicates: int, seed: int) -> list[BenchCell]:
    """Replicated estimator values on a grid; deterministic per-cell seeds.

    ``estimators`` maps name -> callable(q, model, n, rng) -> EstimatorReport.
    ``problems`` maps name -> (q, model).
    """
    if not estimators or not problems or not sample_grid:
        raise ValueError("grid must be non-empty")
    rows = []
    for p_idx, (p_name, (q, model)) in enumerate(sorted(problems.items())):
        for e_idx, (e_name, fn) in enumerate(sorted(estimators.items())):
            for s in sample_grid:
                for r in range(n_replicates):
                    rng = RngStream(seed, (p_idx, e_idx, s, r))
                    rep = fn(q, model, s, rng)
                    rows.append(BenchCell(e_name, p_name, s, r, rep.value))
    return rows


def bench_summary(rows: list[BenchCell]) -> dict:
    """Per (estimator, problem, S) mean / variance / std error over replicates."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        groups.setdefault((row.estimator, row.problem, row.n_samples), []).append(row.value)
    out = {}
    for key, vals in groups.items():
        arr = np.asarray(vals)
        var = float(np.var(arr, ddof=1)) if arr.size > 1 else 0.0
        out[key] = {
            "mean": float(np.mean(arr)),
            "variance": var,
            "std_error": float(np.sqrt(var / arr.size)),
            "replicates": int(arr.size),
        }
    return out


def write_bench_csv(rows: list[BenchCell], path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "problem", "S", "replicate", "value"])
        for row in rows:
            w.writerow([row.estimator, row.problem, row.n_samples,
                        row.replicate, repr(row.value)])
