"""Experiment runner, artifact formats, run comparison, and the CLI."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mogvi.cli import main as cli_main
from mogvi.harness import (
    EXIT_CONFIG,
    EXIT_OK,
    ConfigError,
    ExperimentConfig,
    compare_runs,
    match_components,
    read_run_csv,
    run_experiment,
    write_run_csv,
)
from mogvi.optimizers import RunRecord


def _write_cfg(tmp_path, name="cfg.json", **kw):
    base = dict(model="conjugate", target_mean=[0.9], target_variance=[0.6],
                posterior="gaussian", optimizer="ngvi", beta=0.1, epochs=30,
                mc_samples=4, seed=0, log_every=10, elbo_samples=20,
                out_dir=str(tmp_path / "out"))
    base.update(kw)
    path = tmp_path / name
    path.write_text(json.dumps(base))
    return path, base


# -- config parsing and validation ------------------------------------------

def test_config_rejects_unknown_key(tmp_path):
    path, _ = _write_cfg(tmp_path)
    raw = json.loads(path.read_text())
    raw["learning_rate"] = 0.1
    path.write_text(json.dumps(raw))
    with pytest.raises(ConfigError, match="learning_rate"):
        ExperimentConfig.from_json(path)


def test_config_rejects_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(path)


def test_config_rejects_inconsistent_optimizer_posterior(tmp_path):
    path, _ = _write_cfg(tmp_path, optimizer="mog-serial", posterior="gaussian")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(path)
    path, _ = _write_cfg(tmp_path, name="c2.json", posterior="mog", optimizer="ngvi")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(path)


def test_config_overrides_take_precedence(tmp_path):
    path, _ = _write_cfg(tmp_path)
    cfg = ExperimentConfig.from_json(path, seed=42, out_dir=str(tmp_path / "other"))
    assert cfg.seed == 42
    assert cfg.out_dir.endswith("other")


def test_config_validate_ranges():
    with pytest.raises(ConfigError):
        ExperimentConfig(model="tabular").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(k=0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(beta=0.0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(dataset_path="/nonexistent/file.csv").validate()


# -- run.csv ----------------------------------------------------------------

def _records():
    return [RunRecord(iteration=i, elbo=-1.0 - i, elbo_se=0.1, grad_norm=0.5,
                      clamps=0, wall_ms=3.0 * i,
                      means=np.array([[0.1 * i, 0.2]]),
                      variances=np.array([[1.0, 0.9]]),
                      weights=np.array([1.0]))
            for i in range(3)]


def test_run_csv_round_trip(tmp_path):
    path = tmp_path / "run.csv"
    write_run_csv(path, _records())
    header, data = read_run_csv(path)
    assert header[:6] == ["iter", "elbo", "elbo_se", "grad_norm", "clamps", "wall_ms"]
    assert header[6:] == ["mu0_0", "mu0_1", "sigma0_0", "sigma0_1", "pi0"]
    assert data.shape == (3, 11)
    np.testing.assert_allclose(data[:, 1], [-1.0, -2.0, -3.0])
    np.testing.assert_allclose(data[:, 6], [0.0, 0.1, 0.2])


def test_run_csv_empty_records(tmp_path):
    path = tmp_path / "empty.csv"
    write_run_csv(path, [])
    header, data = read_run_csv(path)
    assert header == ["iter", "elbo", "elbo_se", "grad_norm", "clamps", "wall_ms"]
    assert data.size == 0


# -- run_experiment ---------------------------------------------------------

def test_run_experiment_conjugate_artifacts(tmp_path):
    path, base = _write_cfg(tmp_path)
    cfg = ExperimentConfig.from_json(path)
    assert run_experiment(cfg) == EXIT_OK
    out = Path(base["out_dir"])
    assert (out / "run.csv").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok"
    assert summary["config"]["optimizer"] == "ngvi"
    assert "elbo_estimator" in summary["config"]  # defaults echoed too
    # 30 epochs at beta=0.1 get close to the known posterior mean.
    assert abs(summary["final"]["means"][0][0] - 0.9) < 0.3
    assert not (out / "boundary.csv").exists()  # not a 2-D classifier


def test_run_experiment_logistic_writes_boundary(tmp_path):
    cfg = ExperimentConfig(model="logistic", synth_layout="two-gaussians",
                           synth_n=40, epochs=20, beta=0.1, optimizer="von",
                           log_every=10, elbo_samples=10, boundary_grid=20,
                           predictive_samples=10, out_dir=str(tmp_path / "lg"))
    assert run_experiment(cfg) == EXIT_OK
    out = Path(cfg.out_dir)
    with open(out / "boundary.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "prob"]
    assert len(rows) == 1 + 20 * 20
    probs = np.array([float(r[2]) for r in rows[1:]])
    assert np.all((probs >= 0) & (probs <= 1))
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["test_accuracy"] <= 1.0
    assert (out / "dataset.csv").exists()
    with open(out / "metrics.csv", newline="") as fh:
        mrows = list(csv.reader(fh))
    assert mrows[0] == ["iter", "accuracy"]
    assert len(mrows) > 1
    assert all(0.0 <= float(r[1]) <= 1.0 for r in mrows[1:])


def test_run_experiment_deterministic_modulo_wall_time(tmp_path):
    cfg_a = ExperimentConfig(model="logistic", synth_n=40, epochs=15, beta=0.1,
                             optimizer="von", log_every=5, elbo_samples=10,
                             boundary_grid=10, predictive_samples=10,
                             out_dir=str(tmp_path / "a"))
    cfg_b = ExperimentConfig(**{**cfg_a.__dict__, "out_dir": str(tmp_path / "b")})
    run_experiment(cfg_a)
    run_experiment(cfg_b)
    # boundary.csv is byte identical; run.csv identical outside wall_ms.
    assert (Path(cfg_a.out_dir) / "boundary.csv").read_bytes() == \
        (Path(cfg_b.out_dir) / "boundary.csv").read_bytes()
    ha, da = read_run_csv(Path(cfg_a.out_dir) / "run.csv")
    hb, db = read_run_csv(Path(cfg_b.out_dir) / "run.csv")
    assert ha == hb
    keep = [i for i, name in enumerate(ha) if name != "wall_ms"]
    np.testing.assert_array_equal(da[:, keep], db[:, keep])
    sa = json.loads((Path(cfg_a.out_dir) / "summary.json").read_text())
    sb = json.loads((Path(cfg_b.out_dir) / "summary.json").read_text())
    for s in (sa, sb):
        s.pop("wall_time_s")
        s["config"].pop("out_dir")
    assert sa == sb


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_experiment_nan_exit_code(tmp_path):
    # A divergent step size on the bimodal target blows the parameters up.
    cfg = ExperimentConfig(model="bimodal", bimodal_means=[-2.0, 2.0],
                           bimodal_variances=[0.3, 0.3], posterior="mog", k=2,
                           optimizer="mog-parallel", beta=5.0, epochs=300,
                           mc_samples=1, init_spread=1.0, log_every=50,
                           elbo_samples=10, out_dir=str(tmp_path / "nan"))
    status = run_experiment(cfg)
    summary = json.loads((Path(cfg.out_dir) / "summary.json").read_text())
    if status == EXIT_OK:  # divergence is expected but not guaranteed
        assert summary["status"] == "ok"
    else:
        assert summary["status"] == "nan-abort"
        assert "final" not in summary


# -- comparison -------------------------------------------------------------

def test_match_components_recovers_permutation():
    a = np.array([[0.0, 0.0], [3.0, 3.0], [-2.0, 1.0]])
    b = a[[2, 0, 1]] + 0.01
    perm = match_components(a, b)
    np.testing.assert_array_equal(perm, [1, 2, 0])


def test_compare_runs_on_identical_seeds(tmp_path):
    path_a, base_a = _write_cfg(tmp_path, name="a.json",
                                out_dir=str(tmp_path / "ra"))
    path_b, base_b = _write_cfg(tmp_path, name="b.json",
                                out_dir=str(tmp_path / "rb"))
    run_experiment(ExperimentConfig.from_json(path_a))
    run_experiment(ExperimentConfig.from_json(path_b))
    rows = compare_runs([base_a["out_dir"], base_b["out_dir"]])
    assert len(rows) == 1
    assert rows[0]["max_delta_param"] == 0.0


def test_compare_runs_needs_two_dirs(tmp_path):
    with pytest.raises(ValueError):
        compare_runs([str(tmp_path)])


# -- CLI --------------------------------------------------------------------

def test_cli_fit_and_compare(tmp_path):
    path, base = _write_cfg(tmp_path)
    out_a = str(tmp_path / "cli_a")
    out_b = str(tmp_path / "cli_b")
    assert cli_main(["fit", "--config", str(path), "--out", out_a]) == 0
    assert cli_main(["fit", "--config", str(path), "--out", out_b]) == 0
    cmp_csv = tmp_path / "cmp.csv"
    assert cli_main(["compare", "--runs", f"{out_a},{out_b}",
                     "--out", str(cmp_csv)]) == 0
    text = cmp_csv.read_text()
    assert "max_delta_param" in text


def test_cli_fit_overrides_seed(tmp_path):
    path, _ = _write_cfg(tmp_path)
    out = tmp_path / "cli_seed"
    assert cli_main(["fit", "--config", str(path), "--seed", "7",
                     "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["seed"] == 7


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": "tabular"}))
    assert cli_main(["fit", "--config", str(bad)]) == EXIT_CONFIG


def test_cli_missing_config_file(tmp_path):
    rc = cli_main(["fit", "--config", str(tmp_path / "nope.json")])
    assert rc != 0


def test_cli_bench_variance(tmp_path):
    cfg = tmp_path / "bench.json"
    cfg.write_text(json.dumps({"k": 2, "dim": 1, "seed": 0,
                               "sample_grid": [4], "replicates": 10}))
    out = tmp_path / "bench.csv"
    assert cli_main(["bench-variance", "--config", str(cfg),
                     "--out", str(out)]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "estimator,problem,S,replicate,value"
    assert len(lines) == 1 + 2 * 10  # two estimators, one S, ten replicates
