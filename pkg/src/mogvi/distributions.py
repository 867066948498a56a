"""Diagonal-Gaussian and mixture-of-Gaussians primitives.

Densities, sampling, responsibilities, and the first/second z-derivatives
of the mixture log-density that the per-component update rules consume.
All operations are pure; ``RngStream`` is the only stateful object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

LOG_2PI = float(np.log(2.0 * np.pi))

#: Variance entries are never allowed below this by the optimizers.
VARIANCE_FLOOR = 1e-8


class RngStream:
    """Deterministic random stream keyed by (seed, stream id).

    Identical (seed, stream) pairs replay identical draw sequences;
    distinct stream ids are statistically independent.  ``child`` derives
    a fresh independent stream from the same seed, which is how the
    parallel optimizer hands each component its private stream.
    """

    def __init__(self, seed: int, stream: int | Sequence[int] = ()):
        if isinstance(stream, (int, np.integer)):
            stream = (int(stream),)
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        )

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.stream + tuple(int(k) for k in key))

    def standard_normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs: np.ndarray) -> int:
        """One draw from Categorical(probs) via a single uniform."""
        u = self._gen.uniform()
        return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


@dataclass
class DiagGaussian:
    """Gaussian with diagonal covariance, stored as elementwise variance."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.variance = np.atleast_1d(np.asarray(self.variance, dtype=float))
        if self.mean.shape != self.variance.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != variance shape {self.variance.shape}"
            )
        if not np.all(self.variance > 0):
            raise ValueError("all variance entries must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.copy(), self.variance.copy())


@dataclass
class MixturePosterior:
    """Mixture of diagonal Gaussians with mixing logits rho.

    Weights are ``softmax(logits)``; the optimizers renormalize logits so
    that ``max(logits) == 0`` after every update.
    """

    components: list[DiagGaussian]
    logits: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if len(self.components) < 1:
            raise ValueError("need at least one component")
        d = self.components[0].dim
        if any(c.dim != d for c in self.components):
            raise ValueError("all components must share one dimension")
        if self.logits is None:
            self.logits = np.zeros(len(self.components))
        self.logits = np.atleast_1d(np.asarray(self.logits, dtype=float))
        if self.logits.shape != (len(self.components),):
            raise ValueError("need one logit per component")

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def log_weights(self) -> np.ndarray:
        return self.logits - logsumexp(self.logits)

    @property
    def means(self) -> np.ndarray:
        """(K, d) stack of component means."""
        return np.stack([c.mean for c in self.components])

    @property
    def variances(self) -> np.ndarray:
        return np.stack([c.variance for c in self.components])

    def normalize_logits(self) -> None:
        self.logits = self.logits - np.max(self.logits)

    def copy(self) -> "MixturePosterior":
        return MixturePosterior([c.copy() for c in self.components], self.logits.copy())


def _check_dim(d: int, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != d:
        raise ValueError(f"z has dimension {z.shape[-1]}, expected {d}")
    return z


def gauss_log_pdf(g: DiagGaussian, z: np.ndarray) -> np.ndarray:
    """Log density of a diagonal Gaussian; z is (d,) or (n, d)."""
    z = _check_dim(g.dim, z)
    out = -0.5 * np.sum(
        LOG_2PI + np.log(g.variance) + (z - g.mean) ** 2 / g.variance, axis=-1
    )
    return out


def gauss_sample(g: DiagGaussian, rng: RngStream, size: int | None = None) -> np.ndarray:
    """mu + sigma * eps draws; shape (d,) or (size, d)."""
    shape = (g.dim,) if size is None else (size, g.dim)
    eps = rng.standard_normal(shape)
    return g.mean + np.sqrt(g.variance) * eps


def gauss_entropy(g: DiagGaussian) -> float:
    return float(0.5 * np.sum(np.log(2.0 * np.pi * np.e * g.variance)))


def _component_log_pdfs(q: MixturePosterior, z: np.ndarray) -> np.ndarray:
    """(..., K) matrix of per-component log densities."""
    return np.stack([gauss_log_pdf(c, z) for c in q.components], axis=-1)


def mog_log_pdf(q: MixturePosterior, z: np.ndarray) -> np.ndarray:
    """log sum_c pi_c N(z | mu_c, sigma_c), via log-sum-exp."""
    z = _check_dim(q.dim, z)
    lp = _component_log_pdfs(q, z)
    return logsumexp(lp + q.log_weights, axis=-1)


def mog_sample(q: MixturePosterior, rng: RngStream) -> tuple[int, np.ndarray]:
    """Draw a component index from pi, then a point from that component.

    With K=1 no categorical draw is consumed, so the stream state matches
    a bare ``gauss_sample`` call.
    """
    if q.k == 1:
        i = 0
    else:
        i = rng.categorical(q.weights)
    return i, gauss_sample(q.components[i], rng)


def responsibilities(q: MixturePosterior, z: np.ndarray) -> np.ndarray:
    """delta_c(z) = N(z|mu_c,sigma_c) / sum_c' pi_c' N(z|mu_c',sigma_c').

    Note the numerator carries no pi_c; update rules multiply by pi_c at
    the call site.  Computed in log space, returned in linear space.
    """
    z = _check_dim(q.dim, z)
    lp = _component_log_pdfs(q, z)
    log_mix = logsumexp(lp + q.log_weights, axis=-1)
    return np.exp(lp - log_mix[..., None])


def _posterior_resp(q: MixturePosterior, z: np.ndarray) -> np.ndarray:
    """pi_c * delta_c(z), i.e. q(w=c|z); sums to one over c."""
    lp = _component_log_pdfs(q, z) + q.log_weights
    return softmax(lp, axis=-1)


def mog_score(q: MixturePosterior, z: np.ndarray) -> np.ndarray:
    """grad_z log q(z) = -sum_c pi_c delta_c(z) (z - mu_c) / sigma_c^2."""
    z = _check_dim(q.dim, z)
    r = _posterior_resp(q, z)  # (..., K)
    pulls = (z[..., None, :] - q.means) / q.variances  # (..., K, d)
    return -np.sum(r[..., None] * pulls, axis=-2)


def mog_curvature_diag(q: MixturePosterior, z: np.ndarray) -> np.ndarray:
    """Diagonal of grad_z^2 log q(z).

    Uses the stable expansion -(grad q / q)^2 + (grad^2 q) / q with
    (grad^2 q)/q = sum_c pi_c delta_c [((z-mu_c)/sigma_c^2)^2 - 1/sigma_c^2].
    """
    z = _check_dim(q.dim, z)
    r = _posterior_resp(q, z)
    pulls = (z[..., None, :] - q.means) / q.variances  # (..., K, d)
    score = -np.sum(r[..., None] * pulls, axis=-2)
    d2q_over_q = np.sum(r[..., None] * (pulls**2 - 1.0 / q.variances), axis=-2)
    return -(score**2) + d2q_over_q


def mog_entropy_analytic_conditional(q: MixturePosterior) -> float:
    """H[z|w] = sum_c pi_c * (Gaussian entropy of component c)."""
    return float(np.dot(q.weights, [gauss_entropy(c) for c in q.components]))
