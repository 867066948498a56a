"""Target models: log-joints, derivatives, and datasets.

Sign conventions used throughout the package:

  ell(z)  = sum_i log p(D_i | z)           (log-likelihood, to be maximized)
  g(z)    = grad of -ell                   (negative-log-likelihood gradient)
  H(z)    = Hessian diagonal of -ell
  ELBO    = E_q[log p(z) + ell(z) - log q(z)]

Minibatch gradients are rescaled by N/|M| so stochastic updates target the
full-data objective.  The prior is always N(z | 0, I/lambda).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .distributions import (
    DiagGaussian,
    MixturePosterior,
    RngStream,
    gauss_log_pdf,
    mog_curvature_diag,
    mog_log_pdf,
    mog_score,
)


class IdxError(ValueError):
    """Base class for IDX parsing failures."""


class IdxBadMagic(IdxError):
    pass


class IdxTruncated(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


@dataclass
class Dataset:
    """Feature matrix plus integer labels (binary {0,1} for logistic)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.atleast_1d(np.asarray(self.labels, dtype=int))
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("feature/label row counts differ")
        if self.features.shape[0] < 1:
            raise ValueError("dataset must be non-empty")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature rows must be finite")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_x(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])

    def save_csv(self, path) -> None:
        path = Path(path)
        header = [f"x{j}" for j in range(self.d_x)] + ["label"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row, y in zip(self.features, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(y)])

    @staticmethod
    def load_csv(path) -> "Dataset":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header[-1] != "label":
                raise ValueError("last CSV column must be 'label'")
            feats, labels = [], []
            for row in r:
                feats.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
        return Dataset(np.array(feats), np.array(labels))


@dataclass
class MinibatchSpec:
    """Without-replacement minibatching within each epoch."""

    size: int

    def batches(self, n: int, rng: RngStream):
        if not 1 <= self.size <= n:
            raise ValueError(f"minibatch size {self.size} not in [1, {n}]")
        order = rng.permutation(n)
        for start in range(0, n, self.size):
            yield order[start : start + self.size]


def split_dataset(data: Dataset, test_frac: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    order = rng.permutation(data.n)
    n_test = max(1, int(round(test_frac * data.n)))
    return data.subset(order[n_test:]), data.subset(order[:n_test])


def sigmoid(u: np.ndarray) -> np.ndarray:
    """Numerically stable logistic link, branch split at u = 0."""
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def log_sigmoid(u: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -u)


class TargetModel:
    """Log-joint interface: prior N(0, I/lambda) plus a data term.

    Subclasses supply the likelihood sum ``ell`` and its derivatives in
    the g/H (negative log-likelihood) convention.  All methods accept z of
    shape (d,) or (S, d) and broadcast over the sample axis.
    """

    dim: int
    lam: float
    n_data: int

    # -- prior ---------------------------------------------------------
    def log_prior(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return -0.5 * np.sum(
            np.log(2.0 * np.pi / self.lam) + self.lam * z**2, axis=-1
        )

    def grad_log_prior(self, z: np.ndarray) -> np.ndarray:
        return -self.lam * np.asarray(z, dtype=float)

    def hess_diag_log_prior(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(-self.lam, z.shape).copy()

    # -- likelihood (subclass responsibility) --------------------------
    def log_lik(self, z: np.ndarray, minibatch=None) -> np.ndarray:
        """ell(z), rescaled by N/|M| when a minibatch index set is given."""
        raise NotImplementedError

    def grad_neg_loglik(self, z: np.ndarray, minibatch=None) -> np.ndarray:
        raise NotImplementedError

    def hess_diag_neg_loglik(self, z: np.ndarray, minibatch=None) -> np.ndarray:
        raise NotImplementedError

    def ggn_diag(self, z: np.ndarray, minibatch=None) -> np.ndarray:
        raise NotImplementedError

    # -- joint ---------------------------------------------------------
    def log_joint(self, z: np.ndarray, minibatch=None) -> np.ndarray:
        return self.log_prior(z) + self.log_lik(z, minibatch)

    def grad_log_joint(self, z: np.ndarray, minibatch=None) -> np.ndarray:
        return self.grad_log_prior(z) - self.grad_neg_loglik(z, minibatch)

    def hess_diag_log_joint(self, z: np.ndarray, minibatch=None) -> np.ndarray:
        return self.hess_diag_log_prior(z) - self.hess_diag_neg_loglik(z, minibatch)


class LogisticModel(TargetModel):
    """Bayesian logistic regression with Gaussian prior N(0, I/lambda)."""

    def __init__(self, data: Dataset, lam: float = 1.0, add_intercept: bool = True):
        if not set(np.unique(data.labels)) <= {0, 1}:
            raise ValueError("logistic model needs binary {0,1} labels")
        self.data = data
        self.add_intercept = add_intercept
        x = data.features
        if add_intercept:
            x = np.hstack([x, np.ones((data.n, 1))])
        self.x = x
        self.y = data.labels.astype(float)
        self.dim = x.shape[1]
        self.lam = float(lam)
        self.n_data = data.n

    def design(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        if self.add_intercept:
            return np.hstack([features, np.ones((features.shape[0], 1))])
        return features

    def _batch(self, minibatch):
        if minibatch is None:
            return self.x, self.y, 1.0
        idx = np.asarray(minibatch)
        return self.x[idx], self.y[idx], self.n_data / idx.size

    def log_lik(self, z, minibatch=None):
        x, y, scale = self._batch(minibatch)
        u = np.asarray(z, dtype=float) @ x.T  # (..., m)
        return scale * np.sum(y * log_sigmoid(u) + (1.0 - y) * log_sigmoid(-u), axis=-1)

    def grad_neg_loglik(self, z, minibatch=None):
        x, y, scale = self._batch(minibatch)
        u = np.asarray(z, dtype=float) @ x.T
        return scale * ((sigmoid(u) - y) @ x)

    def hess_diag_neg_loglik(self, z, minibatch=None):
        x, y, scale = self._batch(minibatch)
        u = np.asarray(z, dtype=float) @ x.T
        s = sigmoid(u)
        return scale * ((s * (1.0 - s)) @ x**2)

    def ggn_diag(self, z, minibatch=None):
        """Per-coordinate mean squared per-example gradient, rescaled by N."""
        x, y, scale = self._batch(minibatch)
        u = np.asarray(z, dtype=float) @ x.T
        per_ex = (sigmoid(u) - y)[..., None] * x  # (..., m, d)
        m = x.shape[0]
        return self.n_data * np.mean(per_ex**2, axis=-2) * (scale * m / self.n_data)

    def predictive_prob(self, features, posterior, n_samples: int, rng: RngStream) -> np.ndarray:
        """E_q[sigmoid(x . z)] by posterior sampling."""
        x = self.design(np.atleast_2d(features))
        zs = sample_posterior(posterior, n_samples, rng)
        return np.mean(sigmoid(zs @ x.T), axis=0)


def sample_posterior(posterior, n_samples: int, rng: RngStream) -> np.ndarray:
    """(S, d) draws from a DiagGaussian or MixturePosterior."""
    if isinstance(posterior, DiagGaussian):
        eps = rng.standard_normal((n_samples, posterior.dim))
        return posterior.mean + np.sqrt(posterior.variance) * eps
    w = posterior.weights
    counts_idx = np.searchsorted(np.cumsum(w), rng.uniform(size=n_samples), side="right")
    counts_idx = np.clip(counts_idx, 0, posterior.k - 1)
    eps = rng.standard_normal((n_samples, posterior.dim))
    mu = posterior.means[counts_idx]
    sd = np.sqrt(posterior.variances[counts_idx])
    return mu + sd * eps


class ConjugateGaussianModel(TargetModel):
    """Gaussian likelihood + Gaussian prior; exact posterior in closed form."""

    def __init__(self, y: np.ndarray, noise_variance: np.ndarray, lam: float):
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        self.noise_variance = np.broadcast_to(
            np.asarray(noise_variance, dtype=float), self.y.shape
        ).copy()
        if not np.all(self.noise_variance > 0):
            raise ValueError("noise variance must be positive")
        self.dim = self.y.shape[0]
        self.lam = float(lam)
        self.n_data = 1

    def log_lik(self, z, minibatch=None):
        z = np.asarray(z, dtype=float)
        return -0.5 * np.sum(
            np.log(2.0 * np.pi * self.noise_variance)
            + (z - self.y) ** 2 / self.noise_variance,
            axis=-1,
        )

    def grad_neg_loglik(self, z, minibatch=None):
        return (np.asarray(z, dtype=float) - self.y) / self.noise_variance

    def hess_diag_neg_loglik(self, z, minibatch=None):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(1.0 / self.noise_variance, z.shape).copy()

    def ggn_diag(self, z, minibatch=None):
        g = self.grad_neg_loglik(z)
        return g**2

    def exact_posterior(self) -> DiagGaussian:
        prec = self.lam + 1.0 / self.noise_variance
        var = 1.0 / prec
        return DiagGaussian(var * self.y / self.noise_variance, var)

    def log_evidence(self) -> float:
        marg_var = self.noise_variance + 1.0 / self.lam
        return float(
            -0.5 * np.sum(np.log(2.0 * np.pi * marg_var) + self.y**2 / marg_var)
        )

    def elbo_grads(self, q: DiagGaussian) -> tuple[np.ndarray, np.ndarray]:
        """Exact (grad_mu, grad_sigma2) of the ELBO at a Gaussian q."""
        h = self.lam + 1.0 / self.noise_variance  # constant Hessian of -log joint
        g_mean = (q.mean - self.y) / self.noise_variance
        grad_mu = -self.lam * q.mean - g_mean
        grad_sigma = 0.5 * (1.0 / q.variance - h)
        return grad_mu, grad_sigma


def make_conjugate_target(mu_star: np.ndarray, sigma_star2: np.ndarray,
                          lam: float | None = None) -> ConjugateGaussianModel:
    """Model whose exact posterior is N(mu_star, diag sigma_star2)."""
    mu_star = np.atleast_1d(np.asarray(mu_star, dtype=float))
    sigma_star2 = np.atleast_1d(np.asarray(sigma_star2, dtype=float))
    if not np.all(sigma_star2 > 0):
        raise ValueError("target variance must be positive")
    if lam is None:
        lam = 0.5 * float(np.min(1.0 / sigma_star2))
    noise_prec = 1.0 / sigma_star2 - lam
    if np.any(noise_prec <= 0):
        raise ValueError("prior precision too large for requested posterior variance")
    noise_var = 1.0 / noise_prec
    y = mu_star / (sigma_star2 * noise_prec)
    return ConjugateGaussianModel(y, noise_var, lam)


class MixtureTarget(TargetModel):
    """Target whose posterior is exactly a given diagonal-Gaussian mixture.

    The likelihood is defined as log(mixture) - log(prior), so the joint
    equals the mixture density and the evidence is exactly 1 (log 0).
    """

    def __init__(self, mixture: MixturePosterior, lam: float = 1.0):
        self.mixture = mixture
        self.dim = mixture.dim
        self.lam = float(lam)
        self.n_data = 1

    def log_lik(self, z, minibatch=None):
        return mog_log_pdf(self.mixture, z) - self.log_prior(z)

    def grad_neg_loglik(self, z, minibatch=None):
        return -(mog_score(self.mixture, z) - self.grad_log_prior(z))

    def hess_diag_neg_loglik(self, z, minibatch=None):
        return -(mog_curvature_diag(self.mixture, z) - self.hess_diag_log_prior(z))

    def ggn_diag(self, z, minibatch=None):
        return self.grad_neg_loglik(z) ** 2


def make_bimodal_target(means=(-2.0, 2.0), variances=(0.3, 0.3),
                        weights=(0.5, 0.5), lam: float = 1.0) -> MixtureTarget:
    """d=1 target with a two-Gaussian posterior; the serial/parallel testbed."""
    comps = [DiagGaussian([m], [v]) for m, v in zip(means, variances)]
    logits = np.log(np.asarray(weights, dtype=float))
    return MixtureTarget(MixturePosterior(comps, logits - logits.max()), lam=lam)


def map_fit(model: LogisticModel, z0: np.ndarray | None = None) -> np.ndarray:
    """MAP point of the logistic model (L-BFGS on the negative log-joint)."""
    if z0 is None:
        z0 = np.zeros(model.dim)

    def neg_log_joint(z):
        return -float(model.log_joint(z))

    def grad(z):
        return -(model.grad_log_prior(z) - model.grad_neg_loglik(z))

    res = minimize(neg_log_joint, z0, jac=grad, method="L-BFGS-B")
    return res.x


def make_synthetic_classification(n: int, seed: int, layout: str = "two-gaussians",
                                  expand: bool = False) -> Dataset:
    """Deterministic 2-D binary classification datasets.

    layouts: two-gaussians (linearly separable-ish), two-moons, xor.
    ``expand=True`` appends the degree-2 polynomial features needed to make
    the xor layout learnable by a linear logistic model.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    layout_ids = {"two-gaussians": 1, "two-moons": 2, "xor": 3}
    if layout not in layout_ids:
        raise ValueError(f"unknown layout: {layout}")
    rng = RngStream(seed, (layout_ids[layout],))
    half = n // 2
    n1 = n - half
    if layout == "two-gaussians":
        x0 = rng.standard_normal((half, 2)) * 0.8 + np.array([-1.5, -1.0])
        x1 = rng.standard_normal((n1, 2)) * 0.8 + np.array([1.5, 1.0])
        x = np.vstack([x0, x1])
        y = np.concatenate([np.zeros(half, int), np.ones(n1, int)])
    elif layout == "two-moons":
        t0 = np.pi * rng.uniform(size=half)
        t1 = np.pi * rng.uniform(size=n1)
        x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        x = np.vstack([x0, x1]) + 0.1 * rng.standard_normal((n, 2))
        y = np.concatenate([np.zeros(half, int), np.ones(n1, int)])
    elif layout == "xor":
        x = rng.standard_normal((n, 2)) * 0.5
        quad = rng.integers(0, 4, size=n)
        signs = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=float)
        x = x + 1.5 * signs[quad]
        y = (quad % 2).astype(int)
    order = rng.permutation(n)
    x, y = x[order], y[order]
    if expand:
        x = expand_quadratic(x)
    return Dataset(x, y)


def expand_quadratic(features: np.ndarray) -> np.ndarray:
    """Append x1^2, x2^2, x1*x2 columns to 2-D features."""
    f = np.atleast_2d(features)
    if f.shape[1] != 2:
        raise ValueError("quadratic expansion expects 2-D features")
    return np.hstack([f, f[:, :1] ** 2, f[:, 1:2] ** 2, f[:, :1] * f[:, 1:2]])


# ---------------------------------------------------------------------------
# IDX (MNIST-format) ingestion
# ---------------------------------------------------------------------------

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_idx_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncated(f"{path}: shorter than the magic number")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic == _IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == _IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise IdxBadMagic(f"{path}: bad magic 0x{magic & 0xFFFFFFFF:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncated(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    count = int(np.prod(dims))
    body = raw[header:]
    if len(body) != count:
        raise IdxTruncated(
            f"{path}: expected {count} payload bytes, found {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, subset: int | None = None,
             seed: int = 0, digits: tuple[int, int] | None = (0, 1)) -> Dataset:
    """Parse big-endian IDX image/label pairs into a flat Dataset.

    Pixels are scaled to [0, 1]; ``digits`` filters to a two-class problem
    with labels remapped to {0, 1}; ``subset`` keeps the first n rows after
    a seeded shuffle.  Raises IdxBadMagic / IdxTruncated / IdxCountMismatch.
    """
    images = _read_idx_array(images_path)
    labels = _read_idx_array(labels_path)
    if images.ndim != 3:
        raise IdxBadMagic(f"{images_path}: not an image file")
    if labels.ndim != 1:
        raise IdxBadMagic(f"{labels_path}: not a label file")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    feats = images.reshape(images.shape[0], -1).astype(float) / 255.0
    y = labels.astype(int)
    if digits is not None:
        keep = (y == digits[0]) | (y == digits[1])
        feats, y = feats[keep], y[keep]
        y = (y == digits[1]).astype(int)
    if subset is not None:
        order = RngStream(seed, (71,)).permutation(feats.shape[0])[:subset]
        feats, y = feats[order], y[order]
    return Dataset(feats, y)
