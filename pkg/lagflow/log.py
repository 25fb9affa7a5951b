import os
import logging
import inspect

from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from typing import Iterator, Optional


LOG_DIR = os.environ.get("LAGFLOW_LOG_DIR", os.path.join(os.path.expanduser("~"), ".config", "lagflow"))
LOG_PATH = os.path.join(LOG_DIR, "lagflow.log")

# sweep levels log from worker threads
FILE_FORMAT = "%(asctime)s [PID %(process)d] [%(threadName)s] [%(name)s] [%(levelname)s] %(message)s"


class ConsoleFormatter(logging.Formatter):
    """Bare messages for INFO, a level tag for everything else."""
    _plain = logging.Formatter("%(message)s")
    _tagged = logging.Formatter("[%(levelname)s] %(message)s")

    def format(self, record):
        return (self._plain if record.levelno == logging.INFO else self._tagged).format(record)


def setup_global_logger(debug: bool = False):
    """Setup the global logger with file and console handlers.
    All modules use this configuration.
    """
    root_logger = logging.getLogger()
    if root_logger.handlers:
        return

    root_logger.setLevel(logging.DEBUG)
    file_formatter = logging.Formatter(FILE_FORMAT)

    try:
        os.makedirs(LOG_DIR, exist_ok=True)
        file_handler = RotatingFileHandler(LOG_PATH, maxBytes=1024 * 1024, backupCount=3)
        file_handler.setFormatter(file_formatter)
        root_logger.addHandler(file_handler)
    except OSError as e:
        # Read-only home directories still get console output
        logging.getLogger(__name__).debug(f"File logging disabled: {e}")

    console_handler = logging.StreamHandler()
    console_handler.setLevel(logging.DEBUG if debug else logging.INFO)
    console_handler.setFormatter(file_formatter if debug else ConsoleFormatter())
    root_logger.addHandler(console_handler)


def run_log_path(run_dir: str, config_hash: str) -> str:
    return os.path.join(run_dir, f"run_{config_hash[:12]}.log")


@contextmanager
def run_log(run_dir: str, config_hash: str) -> Iterator[str]:
    """Copy every record emitted inside the block to a log file of the run directory,
    named after the configuration hash. Yields the file path.
    """
    os.makedirs(run_dir, exist_ok=True)
    path = run_log_path(run_dir, config_hash)
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(FILE_FORMAT))
    root_logger = logging.getLogger()
    previous_level = root_logger.level
    if previous_level == logging.NOTSET or previous_level > logging.DEBUG:
        root_logger.setLevel(logging.DEBUG)
    root_logger.addHandler(handler)
    try:
        yield path
    finally:
        root_logger.removeHandler(handler)
        root_logger.setLevel(previous_level)
        handler.close()


def get_logger(name: Optional[str] = None) -> logging.Logger:
    """Return a configured logger for the given module name.
    All loggers share the same configuration.
    """
    if name is None:
        frame = inspect.stack()[1]
        module = inspect.getmodule(frame[0])
        if module and module.__name__ != "__main__":
            name = module.__name__
        else:
            name = os.path.splitext(os.path.basename(frame.filename))[0]
    return logging.getLogger(name)
