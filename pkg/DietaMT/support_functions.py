# Shared support functions across the project

import dataclasses
import logging
import time
import typing
from pathlib import Path
from typing import Any, Callable, Dict, Type, TypeVar, Union

PACKAGE_LOGGER = "DietaMT"

logger = logging.getLogger(__name__)

T = TypeVar("T")


# ----------
# Exceptions
# ----------


class DietaError(Exception):
    """Base class of every error raised by DietaMT."""


class DimensionError(DietaError, ValueError):
    """Tensor shapes do not agree."""


class ContractError(DietaError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(DietaError, ValueError):
    """A configuration value is invalid or a required resource is missing."""


class SequenceLengthError(DietaError, ValueError):
    """A sequence is longer than the model accepts."""


class TokenIndexError(DietaError, IndexError):
    """A token id is outside the vocabulary."""


class InputError(DietaError, ValueError):
    """Input data is malformed (empty corpus, misaligned files, invalid pair)."""


class ClientError(DietaError, RuntimeError):
    """An external endpoint failed (timeout, HTTP error, protocol violation)."""


class PipelineError(DietaError, RuntimeError):
    """A pipeline stage failed hard and cannot continue."""


class CheckpointError(DietaError, ValueError):
    """A checkpoint file is corrupt or does not match the expected layout."""


# -------
# Logging
# -------


def setup_logging(debug: bool = False) -> logging.Logger:
    """
    Configure the package logger with a single stream handler.

    Parameters
    ----------
    debug : bool, optional
        If True, the level is DEBUG, otherwise INFO. Default is False.

    Returns
    -------
    logging.Logger
        The package logger.
    """
    package_logger = logging.getLogger(PACKAGE_LOGGER)
    package_logger.setLevel(logging.DEBUG if debug else logging.INFO)
    if not package_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
        )
        package_logger.addHandler(handler)
    return package_logger


def debug_print(debug: bool, str_to_print: str):
    """
    Log a string at DEBUG level if debug is True

    Parameters
    ----------
    debug : bool
        If True, the string will be logged.
    str_to_print : str
        The string to log.
    """
    if debug:
        logging.getLogger(PACKAGE_LOGGER).debug(str_to_print)


# -----------
# Retry logic
# -----------


def call_with_retry(
    fn: Callable[[], T],
    retries: int = 1,
    backoff: float = 0.5,
    what: str = "call",
    retry_on: tuple = (ClientError,),
) -> T:
    """
    Call ``fn`` and retry it after a pause when it raises one of ``retry_on``.

    Parameters
    ----------
    fn : callable
        Zero-argument function to call.
    retries : int, optional
        Number of additional attempts after the first one. Default is 1.
    backoff : float, optional
        Seconds to wait before the first retry; doubled for every further retry.
    what : str, optional
        Name used in log messages.
    retry_on : tuple of exception types, optional
        Exceptions that trigger a retry. Anything else propagates immediately.

    Returns
    -------
    object
        The value returned by ``fn``.

    Raises
    ------
    Exception
        The last exception raised by ``fn`` once retries are exhausted.
    """
    delay = backoff
    for attempt in range(retries + 1):
        try:
            return fn()
        except retry_on as err:
            if attempt == retries:
                raise
            logger.warning(
                "%s failed (%s); retry %d/%d in %.2fs",
                what,
                err,
                attempt + 1,
                retries,
                delay,
            )
            if delay > 0:
                time.sleep(delay)
            delay *= 2
    raise AssertionError("unreachable")  # pragma: no cover


# ----------------
# key=value config
# ----------------


def read_key_value_file(path: Union[str, Path]) -> Dict[str, str]:
    """
    Read a flat UTF-8 ``key=value`` file. Blank lines and ``#`` comments are ignored.

    Parameters
    ----------
    path : str or Path
        File to read.

    Returns
    -------
    dict
        Mapping of keys to raw string values, in file order.
    """
    values = dict()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {stripped!r}"
                )
            key, value = stripped.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def parse_key_value_lines(text: str) -> Dict[str, str]:
    """Parse ``key=value`` lines held in memory (checkpoint headers)."""
    values = dict()
    for line in text.splitlines():
        if line and not line.startswith("#"):
            key, value = line.split("=", 1)
            values[key] = value
    return values


def format_key_value_lines(values: Dict[str, Any]) -> str:
    """Render a mapping as ``key=value`` lines in insertion order."""
    return "".join(f"{key}={value}\n" for key, value in values.items())


def write_key_value_file(path: Union[str, Path], values: Dict[str, Any]):
    """Write a mapping as a flat ``key=value`` file."""
    Path(path).write_text(format_key_value_lines(values), encoding="utf-8")


def _coerce(value: Any, annotation: Any, name: str) -> Any:
    if not isinstance(value, str):
        return value
    origin = typing.get_origin(annotation)
    if origin is Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value.lower() in ("", "none"):
            return None
        return _coerce(value, args[0], name)
    if annotation is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if annotation is int:
            return int(value)
        if annotation is float:
            return float(value)
    except ValueError as err:
        raise ConfigError(f"{name}: {err}") from None
    return value


def coerce_fields(
    cls: Type[T], values: Dict[str, Any], strict: bool = True
) -> Dict[str, Any]:
    """
    Convert raw string values to the field types declared by a dataclass.

    Parameters
    ----------
    cls : dataclass type
        Target dataclass.
    values : dict
        Raw values (strings or already-typed values).
    strict : bool, optional
        If True, unknown keys raise ConfigError; otherwise they are dropped.

    Returns
    -------
    dict
        Keyword arguments suitable for ``cls(**kwargs)``.
    """
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict()
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"unknown {cls.__name__} key: {key}")
            continue
        kwargs[key] = _coerce(value, hints[key], key)
    return kwargs


def dataclass_from_mapping(
    cls: Type[T], values: Dict[str, Any], strict: bool = True
) -> T:
    """Build a dataclass instance from a (possibly string-valued) mapping."""
    return cls(**coerce_fields(cls, values, strict=strict))
