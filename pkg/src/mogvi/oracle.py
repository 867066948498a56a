"""Independent ground-truth machinery.

Trapezoid quadrature for expectations/ELBO/entropy at d <= 2, central
finite differences, and closed-form conjugate Gaussian posteriors.  Every
other module's tests lean on this one; nothing here shares code with the
estimators or optimizers it arbitrates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .distributions import DiagGaussian, MixturePosterior, gauss_log_pdf, mog_log_pdf


class QuadratureError(RuntimeError):
    """Raised when grid doubling fails to stabilize the integral."""


@dataclass
class QuadratureGrid:
    """Tensor trapezoid grid; bounds should cover +-12 sigma of the mass."""

    lower: np.ndarray
    upper: np.ndarray
    points: int = 4001

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if self.lower.shape != self.upper.shape:
            raise ValueError("bounds shape mismatch")
        if np.any(self.upper <= self.lower):
            raise ValueError("upper bounds must exceed lower bounds")
        if self.points % 2 == 0:
            raise ValueError("points must be odd")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(self.lower[j], self.upper[j], self.points)
            for j in range(self.dim)
        ]

    def nodes(self) -> np.ndarray:
        """(n_total, d) flattened tensor grid."""
        axes = self.axes()
        if self.dim == 1:
            return axes[0][:, None]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def refined(self) -> "QuadratureGrid":
        return QuadratureGrid(self.lower, self.upper, 2 * self.points - 1)


def grid_for(q: DiagGaussian | MixturePosterior, points: int = 4001,
             n_sigma: float = 12.0) -> QuadratureGrid:
    """Grid whose bounds cover +-n_sigma of every mixture component."""
    if isinstance(q, DiagGaussian):
        comps = [q]
    else:
        comps = q.components
    sd = np.stack([np.sqrt(c.variance) for c in comps])
    mu = np.stack([c.mean for c in comps])
    lower = np.min(mu - n_sigma * sd, axis=0)
    upper = np.max(mu + n_sigma * sd, axis=0)
    return QuadratureGrid(lower, upper, points)


def _trapz_nd(values: np.ndarray, grid: QuadratureGrid) -> float:
    axes = grid.axes()
    v = values.reshape(*(len(a) for a in axes))
    for a in reversed(axes):
        v = trapezoid(v, a, axis=-1)
    return float(v)


def quad_integral(f: Callable[[np.ndarray], np.ndarray], grid: QuadratureGrid,
                  self_check: bool = False, tol: float = 1e-8) -> float:
    """Trapezoid integral of f over the grid; f maps (n, d) -> (n,)."""
    if grid.dim > 2:
        raise ValueError("quadrature limited to d <= 2")
    val = _trapz_nd(np.asarray(f(grid.nodes()), dtype=float), grid)
    if self_check:
        fine = _trapz_nd(np.asarray(f(grid.refined().nodes()), dtype=float),
                         grid.refined())
        if not np.isfinite(val) or abs(fine - val) > tol * max(1.0, abs(fine)):
            raise QuadratureError(
                f"grid doubling moved integral by {abs(fine - val):.3e}"
            )
        val = fine
    return val


def quad_expectation(q: DiagGaussian | MixturePosterior,
                     integrand: Callable[[np.ndarray], np.ndarray],
                     grid: QuadratureGrid | None = None,
                     self_check: bool = False) -> float:
    """E_q[integrand(z)] by trapezoid quadrature (d <= 2)."""
    if grid is None:
        grid = grid_for(q)
    log_q = (lambda z: gauss_log_pdf(q, z)) if isinstance(q, DiagGaussian) \
        else (lambda z: mog_log_pdf(q, z))

    def f(z):
        lq = log_q(z)
        w = np.exp(lq)
        g = np.asarray(integrand(z), dtype=float)
        # Outside the envelope the density underflows to 0; 0 * anything = 0.
        return np.where(w > 0, w * g, 0.0)

    return quad_integral(f, grid, self_check=self_check)


def quad_entropy(q: DiagGaussian | MixturePosterior,
                 grid: QuadratureGrid | None = None) -> float:
    """Differential entropy -E_q[log q] by quadrature."""
    log_q = (lambda z: gauss_log_pdf(q, z)) if isinstance(q, DiagGaussian) \
        else (lambda z: mog_log_pdf(q, z))
    return -quad_expectation(q, log_q, grid)


def quad_elbo(log_joint: Callable[[np.ndarray], np.ndarray],
              q: DiagGaussian | MixturePosterior,
              grid: QuadratureGrid | None = None) -> float:
    """E_q[log_joint(z) - log q(z)] by quadrature; the master oracle."""
    log_q = (lambda z: gauss_log_pdf(q, z)) if isinstance(q, DiagGaussian) \
        else (lambda z: mog_log_pdf(q, z))
    return quad_expectation(q, lambda z: np.asarray(log_joint(z)) - log_q(z), grid)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central finite differences with per-coordinate step h*max(1, |x_j|)."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        g[j] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def finite_diff_hess_diag(f: Callable[[np.ndarray], float], x: np.ndarray,
                          h: float = 1e-4) -> np.ndarray:
    """Second-order central differences for the Hessian diagonal."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    f0 = f(x)
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        out[j] = (f(xp) - 2.0 * f0 + f(xm)) / step**2
    return out


def finite_diff_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                         h: float = 1e-5) -> np.ndarray:
    """(m, n) Jacobian of a vector map by central differences."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        step = h * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += step
        xm[j] -= step
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * step))
    return np.stack(cols, axis=-1)


@dataclass
class ConjugateSpec:
    """Gaussian likelihood: observations (n, d) with per-dim noise variance."""

    observations: np.ndarray
    noise_variance: np.ndarray

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        self.noise_variance = np.atleast_1d(np.asarray(self.noise_variance, dtype=float))
        if not np.all(self.noise_variance > 0):
            raise ValueError("noise variance must be positive")


def conjugate_posterior(prior_precision: float | np.ndarray,
                        spec: ConjugateSpec) -> tuple[DiagGaussian, float]:
    """Closed-form posterior and log evidence for Gaussian prior+likelihood.

    Prior is N(0, I/lambda); likelihood is independent N(y_i | z, tau^2)
    per observation row.  Returns (posterior, log evidence).
    """
    y = spec.observations
    tau2 = spec.noise_variance
    n, d = y.shape
    lam = np.broadcast_to(np.asarray(prior_precision, dtype=float), (d,))
    post_prec = lam + n / tau2
    post_var = 1.0 / post_prec
    post_mean = post_var * np.sum(y, axis=0) / tau2
    # Evidence: product over dims of N-fold Gaussian convolution.
    log_ev = 0.0
    for j in range(d):
        # Sequential conjugate updates accumulate the marginal likelihood.
        m, v = 0.0, 1.0 / lam[j]
        for i in range(n):
            log_ev += float(
                gauss_log_pdf(DiagGaussian([m], [v + tau2[j]]), np.array([y[i, j]]))
            )
            prec_new = 1.0 / v + 1.0 / tau2[j]
            m = (m / v + y[i, j] / tau2[j]) / prec_new
            v = 1.0 / prec_new
    return DiagGaussian(post_mean, post_var), log_ev
