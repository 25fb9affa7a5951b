import argparse
import sys

from typing import Optional, Sequence

from lagflow.commands import fit, plotdata, run, validate
from lagflow.log import get_logger, setup_global_logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lagflow", description="Lagrangian transport schemes and their convergence sweeps.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # --- RUN ---
    run_parser = subparsers.add_parser("run", help="Run a convergence sweep.")
    run.register_arguments(run_parser)

    # --- FIT ---
    fit_parser = subparsers.add_parser("fit", help="Fit convergence rates of a run.")
    fit.register_arguments(fit_parser)

    # --- PLOTDATA ---
    plotdata_parser = subparsers.add_parser("plotdata", help="Write gnuplot data files of a run.")
    plotdata.register_arguments(plotdata_parser)

    # --- VALIDATE ---
    validate_parser = subparsers.add_parser("validate", help="Check a configuration file.")
    validate.register_arguments(validate_parser)

    return parser


def main(argv: Optional[Sequence[str]] = None):
    parser = build_parser()
    args, unknown = parser.parse_known_args(argv)

    # Logging setup
    setup_global_logger(debug=getattr(args, "debug", False))
    logger = get_logger()

    logger.info("Starting lagflow.")
    if unknown:
        logger.warning(f"Unknown arguments ignored: {unknown}")
    logger.debug(f"Arguments: {args}")

    if args.command == "run":
        code = run.run_cli(args)
    elif args.command == "fit":
        code = fit.fit_cli(args)
    elif args.command == "plotdata":
        code = plotdata.plotdata_cli(args)
    elif args.command == "validate":
        code = validate.validate_cli(args)
    else:
        parser.print_help()
        code = 1

    logger.info("Finishing lagflow.")
    sys.exit(code)


if __name__ == "__main__":
    main()
