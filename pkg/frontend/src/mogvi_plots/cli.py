"""Command-line entry point.

    plot boundary --in RUN_DIR --out FILE.png [--dpi N]
    plot curves   --in DIR_A[,DIR_B,...] --out FILE.png [--dpi N]

Exit codes: 0 on success, 1 for missing or malformed artifacts, 2 for bad
arguments.  On error no output file is written.
"""

from __future__ import annotations

import argparse
import sys

from .artifacts import ArtifactError
from .figures import PlotSpec, render


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plot",
                                description="figures from mogvi run artifacts")
    sub = p.add_subparsers(dest="kind", required=True)
    for kind, help_text in (("boundary", "decision-boundary contour plot"),
                            ("curves", "ELBO and accuracy training curves")):
        sp = sub.add_parser(kind, help=help_text)
        sp.add_argument("--in", dest="run_dirs", required=True,
                        help="run directory (comma-separated list for curves)")
        sp.add_argument("--out", required=True, help="output image path")
        sp.add_argument("--dpi", type=int, default=100)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    dirs = [d for d in args.run_dirs.split(",") if d]
    try:
        spec = PlotSpec(dirs, args.kind, args.out, dpi=args.dpi)
    except ValueError as e:
        print(f"argument error: {e}", file=sys.stderr)
        return 2
    try:
        render(spec)
    except ArtifactError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
