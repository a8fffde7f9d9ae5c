"""Command-line entry point.

    foamcluster --spec tet.ini --out runs/tet
    foamcluster --cluster prism5 --h 0.1,0.05 --stages build,minimize,analyze --out runs/p5

Exit status: 0 on success, 1 on invalid input, 2 when minimization did not
reach its gradient tolerance (all artifacts are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from foamcluster.builders import SOLIDS, ParameterError
from foamcluster.meshio import FormatError, IoError, import_mesh
from foamcluster.pipeline import STAGES, StageError, parse_stages, run_pipeline
from foamcluster.specfile import SpecError, default_file_spec, read_spec

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="foamcluster", description="Minimize and analyze soap-bubble clusters.")
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="cluster spec file (INI)")
    src.add_argument("--cluster", choices=("prism5", *SOLIDS), help="built-in cluster with default parameters")
    ap.add_argument("--stages", default=",".join(STAGES), help="comma-separated subset of " + ",".join(STAGES))
    ap.add_argument("--h", type=_floats, default=None, help="refinement schedule, e.g. 0.05,0.032,0.016")
    ap.add_argument("--seed", type=int, default=None, help="seed for the perturbation probes")
    ap.add_argument("--out", default="foamcluster_out", help="output directory")
    ap.add_argument("--tol", type=float, default=None, help="projected-gradient tolerance (absolute)")
    ap.add_argument("--max-iters", type=int, default=None, help="descent iterations per level")
    ap.add_argument("--mesh", default=None, help="start from this mmesh file instead of the built mesh")
    ap.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        spec = read_spec(args.spec) if args.spec else default_file_spec(args.cluster)
        over = {}
        if args.h is not None:
            over["refine_schedule"] = args.h
        if args.seed is not None:
            over["seed"] = args.seed
        if args.tol is not None:
            over["grad_tol"] = args.tol
        if args.max_iters is not None:
            over["max_iters"] = args.max_iters
        spec = replace(spec, **over)
        if args.tol is not None and not args.tol > 0:
            raise ValueError("--tol must be positive")
        h = spec.refine_schedule
        if any(x <= 0 for x in h) or any(b >= a for a, b in zip(h, h[1:])):
            raise ValueError("--h must be positive and strictly decreasing")
        stages = parse_stages(args.stages)
        mesh = import_mesh(args.mesh) if args.mesh else None
    except (SpecError, FormatError, ParameterError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    def progress(row):
        if row.iteration % 100 == 0:
            logging.info("iter %d  h=%g  E=%.10g  |g|=%.3e", row.iteration, row.h_max, row.energy, row.grad_norm)

    try:
        report = run_pipeline(spec, stages, args.out, mesh=mesh, figures=not args.no_figures, callback=progress)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc.cause, (ValueError, ParameterError)) else EXIT_NOT_CONVERGED
    print(report.to_text())
    if report.minimize is not None and not report.converged:
        print(f"minimization status: {report.minimize['status']}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
