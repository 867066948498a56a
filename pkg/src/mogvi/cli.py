"""Command-line entry point.

    mogvi fit --config cfg.json [--seed N] [--out DIR] [--optimizer NAME] [--k K]
    mogvi bench-variance --config cfg.json [--out FILE.csv]
    mogvi compare --runs dirA,dirB[,...] [--out FILE.csv]

Flags override values from the config file; the resolved config (defaults
included) is echoed into summary.json.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .distributions import DiagGaussian, MixturePosterior
from .estimators import (
    elbo_entropy_trick,
    elbo_naive,
    variance_bench,
    write_bench_csv,
)
from .harness import (
    EXIT_CONFIG,
    ConfigError,
    ExperimentConfig,
    compare_runs,
    run_experiment,
    write_comparison_csv,
)
from .models import make_conjugate_target
from .optimizers import OPTIMIZER_NAMES


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mogvi",
                                description="natural-gradient VI experiments")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run one training experiment")
    f.add_argument("--config", required=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--out")
    f.add_argument("--optimizer", choices=OPTIMIZER_NAMES)
    f.add_argument("--k", type=int)

    b = sub.add_parser("bench-variance", help="estimator variance benchmark")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default="bench.csv")

    c = sub.add_parser("compare", help="compare finished run directories")
    c.add_argument("--runs", required=True, help="comma-separated run dirs")
    c.add_argument("--out")
    return p


def _cmd_fit(args) -> int:
    overrides = {"seed": args.seed, "out_dir": args.out,
                 "optimizer": args.optimizer, "k": args.k}
    cfg = ExperimentConfig.from_json(args.config, **overrides)
    return run_experiment(cfg)


def _cmd_bench(args) -> int:
    raw = json.loads(Path(args.config).read_text())
    k = int(raw.get("k", 3))
    dim = int(raw.get("dim", 1))
    seed = int(raw.get("seed", 0))
    sample_grid = [int(s) for s in raw.get("sample_grid", [4, 16, 64])]
    n_replicates = int(raw.get("replicates", 200))

    model = make_conjugate_target(np.full(dim, 1.0), np.full(dim, 0.5))
    spread = np.linspace(-1.5, 1.5, k)
    comps = [DiagGaussian(np.full(dim, m), np.full(dim, 0.4 + 0.2 * i))
             for i, m in enumerate(spread)]
    q = MixturePosterior(comps, np.zeros(k))

    estimators = {
        "naive": lambda q_, m_, s, rng: elbo_naive(q_, m_, s * q_.k, rng),
        "entropy-trick": lambda q_, m_, s, rng: elbo_entropy_trick(q_, m_, s, rng),
    }
    problems = {f"conjugate-k{k}": (q, model)}
    rows = variance_bench(estimators, problems, sample_grid, n_replicates, seed)
    write_bench_csv(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def _cmd_compare(args) -> int:
    dirs = [d for d in args.runs.split(",") if d]
    rows = compare_runs(dirs)
    if args.out:
        write_comparison_csv(rows, args.out)
        print(f"wrote {args.out}")
    else:
        json.dump(rows, sys.stdout, indent=2)
        print()
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            return _cmd_fit(args)
        if args.command == "bench-variance":
            return _cmd_bench(args)
        if args.command == "compare":
            return _cmd_compare(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
