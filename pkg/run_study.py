import argparse
import sys

from src.errors import StageError, UniqueContinuationError
from src.runner import ExperimentConfig, run_study


def error_line(exc):
    """Machine-readable one-line error report."""
    if isinstance(exc, StageError):
        stage, level, cause = exc.stage, exc.level, exc.cause
    else:
        stage, level, cause = 'config', -1, exc
    message = str(cause).replace('\n', ' ')
    return f"ERROR stage={stage} level={level} type={type(cause).__name__} message={message}"


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="Unfitted finite element unique continuation studies for interface problems.")
    parser.add_argument("--config", required=True, help="Path to the JSON study configuration")
    parser.add_argument("--levels", type=int, help="Number of refinement levels")
    parser.add_argument("--p", type=int, help="Polynomial degree of the solution spaces")
    parser.add_argument("--q", type=int, help="Order of the isoparametric geometry")
    parser.add_argument("--sweep", help="Parameter sweep as axis=v1,v2,... (e.g. gammaIF=0,1)")
    parser.add_argument("--seed", type=int, help="Seed of the data perturbation")
    parser.add_argument("--out", help="Output CSV path")
    parser.add_argument("--quiet", action="store_true", help="Only print errors")
    args = parser.parse_args(argv)

    try:
        config = ExperimentConfig.from_file(args.config).with_overrides(
            levels=args.levels, p=args.p, q=args.q, sweep=args.sweep,
            seed=args.seed, out=args.out, quiet=args.quiet)
        run_study(config)
    except UniqueContinuationError as exc:
        print(error_line(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
