# -*- coding: utf-8 -*-

"""Multicenter lesion-segmentation laboratory."""

import logging
import logging.config
import os
from pathlib import Path

import yaml
from rich.console import Console

__version__ = "0.1.0"

debug = False


class Error(Exception):
    """
    General mclab error.

    Subclasses are defined next to the code raising them. The
    exit_code is used by the command line interface when an error
    reaches the entry point.

    """

    exit_code: int = 1


_root_path = Path(__file__).parent.parent.parent.resolve()


#
# ENV VARS
#

ENV_DIR_DATA = "MCLAB_DATA"
ENV_SEED = "MCLAB_SEED"

ENV_LOG_CONF = "MCLAB_LOG_CONF"
ENV_LOG_FILE = "MCLAB_LOG_FILE"


def _env(key: str, default):
    if key in os.environ:
        return os.environ[key]
    return default


class _DIR:
    ROOT: Path = _root_path
    CONF: Path = _root_path / "conf"
    DATA: Path = Path(_env(ENV_DIR_DATA, _root_path / "data"))


class ENV:
    """mclab environment."""

    DIR = _DIR


def seed_override() -> int | None:
    """
    Read the seed override from the environment.

    Returns
    -------
    int | None
        The value of MCLAB_SEED if set

    Raises
    ------
    mclab.collections.ConfigError
        If MCLAB_SEED is not a non-negative integer

    """
    # collections imports this module
    from mclab.collections import ConfigError

    raw = _env(ENV_SEED, None)
    if raw is None:
        return None

    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_SEED}={raw!r} is not an integer") from None

    if seed < 0:
        raise ConfigError(f"{ENV_SEED}={raw!r} must not be negative")

    return seed


#
#   --- LOG RELATED
#


log = logging.getLogger(__name__)


# if used as library do not log anything
log.addHandler(logging.NullHandler())


def init_logging(logfile: Path | str | None = None):
    """
    Read the logging configuration from conf/ and initialize.

    Parameters
    ----------
    logfile : Path | str | None
        Redirect the file handler, takes precedence over MCLAB_LOG_FILE

    """
    for handler in list(log.handlers):
        if isinstance(handler, logging.NullHandler):
            log.removeHandler(handler)

    conf_file = Path(_env(ENV_LOG_CONF, ENV.DIR.CONF / "logging.yaml"))
    if not conf_file.exists():
        return

    with conf_file.open(mode="r") as fd:
        conf = yaml.safe_load(fd)

    for handler in conf.get("handlers", {}).values():
        if "filename" not in handler:
            continue

        filename = str(logfile) if logfile else _env(ENV_LOG_FILE, None)
        filename = filename or handler["filename"].format(ENV=ENV)

        Path(filename).parent.mkdir(parents=True, exist_ok=True)
        handler["filename"] = filename

    logging.config.dictConfig(conf)
    logging.captureWarnings(True)

    log.info(f"logging initialized, mclab version {__version__}")


#
#   --- CLI RELATED
#


# console is quiet by default
console = Console(quiet=True)


def tee(log_instance: logging.Logger):
    def _tee(*messages: str, level=logging.INFO):
        for message in messages:
            log_instance.log(level, message)
        console.log(*messages, _stack_offset=2)

    return _tee
