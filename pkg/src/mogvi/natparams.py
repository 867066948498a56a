"""Natural / expectation parameter maps for diagonal Gaussians.

Also hosts the variable-transformation check: the natural gradient in
eta-space (computed the expensive way, with an explicit finite-difference
Fisher matrix) must equal the plain gradient in m-space.  The Fisher
matrix is materialized only here, never in production update paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import DiagGaussian, RngStream
from .models import TargetModel, sample_posterior
from .oracle import (
    QuadratureGrid,
    finite_diff_grad,
    finite_diff_jacobian,
    grid_for,
    quad_elbo,
)


@dataclass
class NaturalParams:
    """eta1 = mu / sigma^2, eta2 = -1 / (2 sigma^2) elementwise."""

    eta1: np.ndarray
    eta2: np.ndarray

    def __post_init__(self):
        self.eta1 = np.atleast_1d(np.asarray(self.eta1, dtype=float))
        self.eta2 = np.atleast_1d(np.asarray(self.eta2, dtype=float))
        if self.eta1.shape != self.eta2.shape:
            raise ValueError("eta1/eta2 shape mismatch")
        if not np.all(self.eta2 < 0):
            raise ValueError("eta2 entries must be strictly negative")


@dataclass
class ExpectationParams:
    """m1 = E[z] = mu, m2 = diag E[z z^T] = mu^2 + sigma^2 elementwise."""

    m1: np.ndarray
    m2: np.ndarray

    def __post_init__(self):
        self.m1 = np.atleast_1d(np.asarray(self.m1, dtype=float))
        self.m2 = np.atleast_1d(np.asarray(self.m2, dtype=float))
        if self.m1.shape != self.m2.shape:
            raise ValueError("m1/m2 shape mismatch")
        if not np.all(self.m2 - self.m1**2 > 0):
            raise ValueError("m2 - m1^2 must be strictly positive")


def to_natural(g: DiagGaussian) -> NaturalParams:
    return NaturalParams(g.mean / g.variance, -0.5 / g.variance)


def from_natural(p: NaturalParams) -> DiagGaussian:
    variance = -0.5 / p.eta2
    return DiagGaussian(variance * p.eta1, variance)


def to_expectation(g: DiagGaussian) -> ExpectationParams:
    return ExpectationParams(g.mean, g.mean**2 + g.variance)


def from_expectation(p: ExpectationParams) -> DiagGaussian:
    return DiagGaussian(p.m1, p.m2 - p.m1**2)


@dataclass
class NatGradReport:
    """Result of the variable-transformation consistency check."""

    max_rel_discrepancy: float
    fim_identity_residual: float
    grad_m: np.ndarray
    natural_grad_eta: np.ndarray
    quad_elbo: float
    mc_elbo: float


def _eta_vec(g: DiagGaussian) -> np.ndarray:
    p = to_natural(g)
    return np.concatenate([p.eta1, p.eta2])


def _gauss_from_eta_vec(v: np.ndarray) -> DiagGaussian:
    d = v.size // 2
    return from_natural(NaturalParams(v[:d], v[d:]))


def _m_vec_from_eta_vec(v: np.ndarray) -> np.ndarray:
    p = to_expectation(_gauss_from_eta_vec(v))
    return np.concatenate([p.m1, p.m2])


def natgrad_check(model: TargetModel, g: DiagGaussian, n_mc: int,
                  rng: RngStream, fd_step: float = 1e-5) -> NatGradReport:
    """Verify F(eta)^-1 grad_eta L == grad_m L on a d <= 2 target.

    grad_m L comes from the chain-rule identities
      grad_m1 L = grad_mu L - 2 (grad_sigma L) * mu,   grad_m2 L = grad_sigma L,
    with grad_mu L and grad_sigma L taken by finite differences of the
    quadrature ELBO.  grad_eta L and F = dm/deta use finite differences in
    eta-space.  The grid is frozen so the ELBO is smooth in the parameters.
    """
    if g.dim > 2:
        raise ValueError("quadrature check limited to d <= 2")
    grid = grid_for(g, points=2001, n_sigma=14.0)
    d = g.dim

    def elbo_mu_sigma(v: np.ndarray) -> float:
        return quad_elbo(model.log_joint, DiagGaussian(v[:d], v[d:]), grid)

    def elbo_eta(v: np.ndarray) -> float:
        return quad_elbo(model.log_joint, _gauss_from_eta_vec(v), grid)

    x0 = np.concatenate([g.mean, g.variance])
    grad_ms = finite_diff_grad(elbo_mu_sigma, x0, h=fd_step)
    grad_mu, grad_sigma = grad_ms[:d], grad_ms[d:]
    grad_m = np.concatenate([grad_mu - 2.0 * grad_sigma * g.mean, grad_sigma])

    eta0 = _eta_vec(g)
    grad_eta = finite_diff_grad(elbo_eta, eta0, h=fd_step)
    fim = finite_diff_jacobian(_m_vec_from_eta_vec, eta0, h=fd_step)
    fim_inv = np.linalg.inv(fim)
    natural_grad = fim_inv @ grad_eta

    scale = max(1.0, float(np.max(np.abs(grad_m))))
    discrepancy = float(np.max(np.abs(natural_grad - grad_m))) / scale
    identity_residual = float(
        np.max(np.abs(fim @ fim_inv - np.eye(2 * d)))
    )

    elbo_q = quad_elbo(model.log_joint, g, grid)
    zs = sample_posterior(g, n_mc, rng)
    from .distributions import gauss_log_pdf  # local import avoids cycle noise

    mc = float(np.mean(model.log_joint(zs) - gauss_log_pdf(g, zs)))
    return NatGradReport(discrepancy, identity_residual, grad_m, natural_grad,
                         elbo_q, mc)
