import functools
import logging
import traceback
from typing import Callable, Optional

import click

logger = logging.getLogger(__name__)


class VSFormerError(Exception):
    """Base error for every failure the package reports on purpose"""
    exit_code = 1

    def __init__(self, message: str, exit_code: Optional[int] = None):
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        super().__init__(self.message)


class DimensionError(VSFormerError):
    """Operand shapes do not conform"""


class NumericalError(VSFormerError):
    """A NaN or Inf escaped an operation"""


class ContractError(VSFormerError):
    """An API precondition was violated by the caller"""


class DeterminismError(VSFormerError):
    """Two evaluations that must agree did not"""


class InputError(VSFormerError):
    """Bad user data: views, labels, ratios, epochs"""
    exit_code = 2


class ConfigError(VSFormerError):
    """Invalid or unknown configuration value"""
    exit_code = 2


class StateError(VSFormerError):
    """Object used before it reached the required state"""


class ParseError(VSFormerError):
    """Malformed text file; carries the offending line number"""
    exit_code = 2

    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class CheckpointError(VSFormerError):
    """Checkpoint archive is corrupt or does not match the model; carries the key"""
    exit_code = 3

    def __init__(self, message: str, key: str):
        self.key = key
        super().__init__(f"checkpoint key '{key}': {message}")


def handle_cli_errors(func: Callable) -> Callable:
    """Turn package errors into a logged message and a nonzero exit"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except VSFormerError as exc:
            logger.error(f"{type(exc).__name__}: {exc.message}")
            click.echo(f"Error: {exc.message}", err=True)
            raise click.exceptions.Exit(exc.exit_code)
        except click.exceptions.ClickException:
            raise
        except click.exceptions.Exit:
            raise
        except Exception as exc:
            logger.error(f"Unexpected error: {str(exc)}")
            logger.error(f"Traceback: {traceback.format_exc()}")
            click.echo(f"Error: unexpected failure ({exc})", err=True)
            raise click.exceptions.Exit(1)

    return wrapper
