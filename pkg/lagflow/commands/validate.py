import argparse

from lagflow.config import config_hash, describe_levels, load_config, resolve_workers
from lagflow.errors import ConfigError
from lagflow.log import get_logger


logger = get_logger()


def register_arguments(parser: argparse.ArgumentParser):
    """Register command-line arguments for the validate command."""
    parser.add_argument("config", help="Path to the experiment configuration (JSON).")
    parser.add_argument("--debug", action="store_true", default=False, help="Show debug output on the console.")


def validate_cli(args: argparse.Namespace) -> int:
    """Check a configuration without running it."""
    try:
        config = load_config(args.config)
        workers = resolve_workers(config)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2

    logger.info(f"{args.config} is valid (hash {config_hash(config)})")
    logger.info(f"scheme={config.scheme}, field={config.field.name}, mesh={config.mesh.kind} d={config.mesh.d}, "
                f"metric={config.metric.kind}, n_reps={config.n_reps}, workers={workers}")
    for level in describe_levels(config):
        logger.info(f"  dt=2^-{level['dt_level']} ({level['dt']:g}), N={level['resolution']}")
    return 0
