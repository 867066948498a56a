"""Experiment orchestration and artifact persistence.

Reads a JSON experiment config, runs one training job, and writes
run.csv / summary.json (+ boundary.csv for 2-D classifiers) into the
output directory.  All files are written to a temp name and renamed, so
an artifact is either complete or absent.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .distributions import DiagGaussian, MixturePosterior, RngStream
from .models import (
    Dataset,
    LogisticModel,
    expand_quadratic,
    make_bimodal_target,
    make_conjugate_target,
    make_synthetic_classification,
    split_dataset,
)
from .optimizers import (
    OPTIMIZER_NAMES,
    NanAbort,
    OptimizerConfig,
    RunRecord,
    fit,
    init_mixture,
)


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending key."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NAN = 3


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; serialized verbatim into summary.json."""

    # model
    model: str = "logistic"                # logistic | conjugate | bimodal
    dataset_path: str | None = None        # CSV path; overrides synth spec
    synth_layout: str = "two-gaussians"
    synth_n: int = 200
    synth_seed: int = 0
    synth_expand: bool = False
    test_frac: float = 0.25
    lam: float = 1.0
    # conjugate / bimodal targets
    target_mean: list = field(default_factory=lambda: [1.0])
    target_variance: list = field(default_factory=lambda: [0.5])
    bimodal_means: list = field(default_factory=lambda: [-2.0, 2.0])
    bimodal_variances: list = field(default_factory=lambda: [0.3, 0.3])
    # posterior
    posterior: str = "gaussian"            # gaussian | mog
    k: int = 1
    init_spread: float = 0.0               # stagger of initial component means
    # optimizer
    optimizer: str = "mog-parallel"
    beta: float = 0.01
    epochs: int = 500
    mc_samples: int = 1
    minibatch: int | None = None
    seed: int = 0
    variance_floor: float = 1e-8
    log_every: int = 10
    elbo_samples: int = 100
    elbo_estimator: str = "naive"
    early_stop: bool = False
    # outputs
    out_dir: str = "runs/out"
    boundary_grid: int = 200
    predictive_samples: int = 100

    def validate(self) -> None:
        if self.model not in ("logistic", "conjugate", "bimodal"):
            raise ConfigError(f"model: unknown kind '{self.model}'")
        if self.posterior not in ("gaussian", "mog"):
            raise ConfigError(f"posterior: unknown kind '{self.posterior}'")
        if self.optimizer not in OPTIMIZER_NAMES:
            raise ConfigError(f"optimizer: unknown name '{self.optimizer}'")
        if self.optimizer.startswith("mog-") and self.posterior != "mog":
            raise ConfigError("optimizer: mixture optimizers require posterior='mog'")
        if self.posterior == "mog" and not self.optimizer.startswith("mog-"):
            raise ConfigError("optimizer: posterior='mog' requires a mog-* optimizer")
        if self.k < 1:
            raise ConfigError("k: must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.beta <= 0:
            raise ConfigError("beta: must be positive")
        if self.dataset_path is not None and not Path(self.dataset_path).exists():
            raise ConfigError(f"dataset_path: no such file '{self.dataset_path}'")

    @staticmethod
    def from_json(path, **overrides) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from e
        known = set(ExperimentConfig().__dict__)
        for key in raw:
            if key not in known:
                raise ConfigError(f"{path}: unknown config key '{key}'")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        cfg = ExperimentConfig(**raw)
        cfg.validate()
        return cfg

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            beta=self.beta, lam=self.lam, epochs=self.epochs,
            mc_samples=self.mc_samples, minibatch=self.minibatch,
            seed=self.seed, variance_floor=self.variance_floor,
            log_every=self.log_every, elbo_samples=self.elbo_samples,
            elbo_estimator=self.elbo_estimator, early_stop=self.early_stop,
        )


def _atomic_write(path: Path, writer) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _run_csv_header(k: int, d: int) -> list[str]:
    cols = ["iter", "elbo", "elbo_se", "grad_norm", "clamps", "wall_ms"]
    for c in range(k):
        cols += [f"mu{c}_{j}" for j in range(d)]
        cols += [f"sigma{c}_{j}" for j in range(d)]
        cols += [f"pi{c}"]
    return cols


def write_run_csv(path, records: list[RunRecord]) -> None:
    if not records:
        header = _run_csv_header(0, 0)
        _atomic_write(Path(path), lambda fh: csv.writer(fh).writerow(header))
        return
    k, d = records[0].means.shape
    header = _run_csv_header(k, d)

    def writer(fh):
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            row = [r.iteration, repr(float(r.elbo)), repr(float(r.elbo_se)),
                   repr(float(r.grad_norm)), r.clamps, repr(round(r.wall_ms, 3))]
            for c in range(k):
                row += [repr(float(v)) for v in r.means[c]]
                row += [repr(float(v)) for v in r.variances[c]]
                row += [repr(float(r.weights[c]))]
            w.writerow(row)

    _atomic_write(Path(path), writer)


def read_run_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    return header, data


def build_model(cfg: ExperimentConfig):
    if cfg.model == "conjugate":
        return make_conjugate_target(np.asarray(cfg.target_mean, dtype=float),
                                     np.asarray(cfg.target_variance, dtype=float)), None, None
    if cfg.model == "bimodal":
        return make_bimodal_target(cfg.bimodal_means, cfg.bimodal_variances,
                                   lam=cfg.lam), None, None
    if cfg.dataset_path is not None:
        data = Dataset.load_csv(cfg.dataset_path)
    else:
        data = make_synthetic_classification(cfg.synth_n, cfg.synth_seed,
                                             cfg.synth_layout, expand=cfg.synth_expand)
    train, test = split_dataset(data, cfg.test_frac, RngStream(cfg.synth_seed, (9,)))
    return LogisticModel(train, lam=cfg.lam), train, test


def build_posterior(cfg: ExperimentConfig, dim: int):
    if cfg.posterior == "gaussian":
        return DiagGaussian(np.zeros(dim), np.ones(dim))
    return init_mixture(cfg.k, dim, cfg.seed, spread=cfg.init_spread)


def _boundary_rows(model: LogisticModel, posterior, cfg: ExperimentConfig,
                   data: Dataset) -> list[tuple[float, float, float]]:
    raw = data.features[:, :2]
    lo = raw.min(axis=0) - 1.0
    hi = raw.max(axis=0) + 1.0
    n = cfg.boundary_grid
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    if cfg.synth_expand:
        pts_feat = expand_quadratic(pts)
    else:
        pts_feat = pts
    rng = RngStream(cfg.seed, (0xB0,))
    probs = model.predictive_prob(pts_feat, posterior, cfg.predictive_samples, rng)
    return [(float(p[0]), float(p[1]), float(pr)) for p, pr in zip(pts, probs)]


def accuracy(model: LogisticModel, posterior, data: Dataset,
             n_samples: int, rng: RngStream) -> float:
    probs = model.predictive_prob(data.features, posterior, n_samples, rng)
    return float(np.mean((probs > 0.5).astype(int) == data.labels))


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> int:
    """Run one experiment; returns a process exit status."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    model, train, test = build_model(cfg)
    q0 = build_posterior(cfg, model.dim)
    t0 = time.perf_counter()
    status = EXIT_OK
    try:
        q, records = fit(q0, model, cfg.optimizer_config(), cfg.optimizer)
    except NanAbort as e:
        q, records = None, e.records
        status = EXIT_NAN
    wall = time.perf_counter() - t0

    write_run_csv(out / "run.csv", records)

    summary = {
        "config": asdict(cfg),
        "status": "nan-abort" if status == EXIT_NAN else "ok",
        "epochs_run": (records[-1].iteration + 1) if records else 0,
        "clamp_events": int(sum(r.clamps for r in records)),
        "wall_time_s": round(wall, 3),
    }
    if q is not None:
        means, variances, weights = _final_params(q)
        summary["final"] = {
            "means": means, "variances": variances, "weights": weights,
            "elbo": records[-1].elbo if records else None,
        }
        if isinstance(model, LogisticModel) and test is not None:
            acc_rng = RngStream(cfg.seed, (0xACC,))
            summary["test_accuracy"] = accuracy(model, q, test,
                                                cfg.predictive_samples, acc_rng)
            summary["train_accuracy"] = accuracy(model, q, train,
                                                 cfg.predictive_samples,
                                                 RngStream(cfg.seed, (0xACD,)))
            _write_metrics_csv(out / "metrics.csv", model, test, records, cfg)
        if isinstance(model, LogisticModel) and train is not None and train.d_x >= 2:
            rows = _boundary_rows(model, q, cfg, train)

            def bwriter(fh):
                w = csv.writer(fh)
                w.writerow(["x", "y", "prob"])
                for r in rows:
                    w.writerow([repr(r[0]), repr(r[1]), repr(r[2])])

            _atomic_write(out / "boundary.csv", bwriter)
            train.save_csv(out / "dataset.csv")

    _atomic_write(out / "summary.json",
                  lambda fh: json.dump(summary, fh, indent=2, sort_keys=True))
    return status


def _posterior_from_record(r: RunRecord):
    comps = [DiagGaussian(r.means[c], r.variances[c]) for c in range(r.means.shape[0])]
    if len(comps) == 1:
        return comps[0]
    return MixturePosterior(comps, np.log(np.maximum(r.weights, 1e-300)))


def _write_metrics_csv(path, model, test, records, cfg) -> None:
    """Test accuracy at every logged iterate, replayed from the snapshots.

    Written so downstream plotting can show accuracy-vs-iteration without
    computing any statistics of its own.
    """
    rows = []
    for r in records:
        rng = RngStream(cfg.seed, (0xACE, r.iteration))
        rows.append((r.iteration, accuracy(model, _posterior_from_record(r),
                                           test, cfg.predictive_samples, rng)))

    def writer(fh):
        w = csv.writer(fh)
        w.writerow(["iter", "accuracy"])
        for it, acc in rows:
            w.writerow([it, repr(float(acc))])

    _atomic_write(Path(path), writer)


def _final_params(q):
    if isinstance(q, DiagGaussian):
        return [q.mean.tolist()], [q.variance.tolist()], [1.0]
    return ([c.mean.tolist() for c in q.components],
            [c.variance.tolist() for c in q.components],
            q.weights.tolist())


def match_components(means_a: np.ndarray, means_b: np.ndarray) -> np.ndarray:
    """Best permutation of b's components onto a's (assignment on mean distance)."""
    cost = np.linalg.norm(means_a[:, None, :] - means_b[None, :, :], axis=-1)
    _, cols = linear_sum_assignment(cost)
    return cols


def compare_runs(run_dirs: list) -> list[dict]:
    """Aligned final-parameter and trace comparison across >= 2 run dirs."""
    if len(run_dirs) < 2:
        raise ValueError("need at least two run directories")
    summaries = []
    for d in run_dirs:
        p = Path(d) / "summary.json"
        if not p.exists():
            raise FileNotFoundError(f"{p} missing")
        summaries.append(json.loads(p.read_text()))
    base = summaries[0]
    if "final" not in base:
        raise ValueError(f"{run_dirs[0]}: no final parameters recorded")
    rows = []
    base_mu = np.asarray(base["final"]["means"], dtype=float)
    for d, s in zip(run_dirs[1:], summaries[1:]):
        if "final" not in s:
            raise ValueError(f"{d}: no final parameters recorded")
        mu = np.asarray(s["final"]["means"], dtype=float)
        if mu.shape != base_mu.shape:
            raise ValueError(f"{d}: component shape mismatch vs {run_dirs[0]}")
        perm = match_components(base_mu, mu)
        var_a = np.asarray(base["final"]["variances"], dtype=float)
        var_b = np.asarray(s["final"]["variances"], dtype=float)[perm]
        w_a = np.asarray(base["final"]["weights"], dtype=float)
        w_b = np.asarray(s["final"]["weights"], dtype=float)[perm]
        delta_mu = float(np.max(np.abs(base_mu - mu[perm])))
        delta_var = float(np.max(np.abs(var_a - var_b)))
        delta_w = float(np.max(np.abs(w_a - w_b)))
        row = {
            "run": str(d), "baseline": str(run_dirs[0]),
            "permutation": perm.tolist(),
            "max_delta_mean": delta_mu,
            "max_delta_variance": delta_var,
            "max_delta_weight": delta_w,
            "max_delta_param": max(delta_mu, delta_var, delta_w),
        }
        ratio = _elbo_variance_ratio(run_dirs[0], d)
        if ratio is not None:
            row["elbo_trace_variance_ratio"] = ratio
        rows.append(row)
    return rows


def _elbo_variance_ratio(dir_a, dir_b) -> float | None:
    """Var ratio of last-half ELBO traces (a over b); None if unavailable."""
    try:
        _, a = read_run_csv(Path(dir_a) / "run.csv")
        _, b = read_run_csv(Path(dir_b) / "run.csv")
    except (OSError, ValueError, IndexError):
        return None
    if a.size == 0 or b.size == 0:
        return None
    half_a, half_b = a[len(a) // 2:, 1], b[len(b) // 2:, 1]
    if len(half_a) < 3 or len(half_b) < 3 or np.var(half_b, ddof=1) == 0:
        return None
    return float(np.var(half_a, ddof=1) / np.var(half_b, ddof=1))


def write_comparison_csv(rows: list[dict], path) -> None:
    keys = sorted({k for r in rows for k in r})

    def writer(fh):
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)

    _atomic_write(Path(path), writer)
