"""
Utility functions for the CoactSeg project.

This module contains helpers for:
- Logging setup
- Error handling (the package's exception classes)
- Seed derivation and small validation checks
- CSV tables carrying the root seed of the run
"""

import logging
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger("coactseg")


def setup_logging(log_path: Optional[str] = None, level: str = "INFO") -> logging.Logger:
    """
    Configure the package logger.

    Args:
        log_path: Optional file to mirror the console output into
        level: Logging level name

    Returns:
        The configured "coactseg" logger
    """
    handlers = [logging.StreamHandler()]
    if log_path:
        handlers.append(logging.FileHandler(log_path))

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    logger.setLevel(level.upper())
    logger.propagate = False
    return logger


class CoactSegError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(CoactSegError, ValueError):
    """Raised when array or volume dimensions do not agree."""


class VolumeFormatError(CoactSegError):
    """Raised for unreadable COACTVOL volumes or checkpoints."""


class PhantomError(CoactSegError):
    """Raised when a phantom cannot be generated from its configuration."""


class SamplerError(CoactSegError):
    """Raised when patches or batches cannot be drawn."""


class LossError(CoactSegError):
    """Raised when a loss term is called with incomplete inputs."""


class ConfigError(CoactSegError):
    """Raised for invalid configuration keys or values."""


class TrainingError(CoactSegError):
    """Raised for invalid manifests and diverging optimization."""


class InferenceError(CoactSegError):
    """Raised when a volume cannot be predicted with the given window."""


class VerificationError(CoactSegError):
    """Raised when a numerical verification (gradient check, acceptance) fails."""


def derive_seed(root_seed: int, *counters: int) -> int:
    """
    Derive an independent 63-bit seed from a root seed and integer counters.

    Args:
        root_seed: Root seed of the run
        counters: Stream identifiers (sample kind, index, ...)

    Returns:
        Derived seed, stable across platforms
    """
    sequence = np.random.SeedSequence([int(root_seed), *[int(c) for c in counters]])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def as_triple(value, name: str = "value") -> Tuple[int, int, int]:
    """
    Expand an int or a 3-sequence into an integer triple.

    Args:
        value: Scalar or sequence of three values
        name: Name used in the error message

    Returns:
        Tuple of three ints
    """
    if isinstance(value, (int, np.integer)):
        return (int(value),) * 3
    items = tuple(int(v) for v in value)
    if len(items) != 3:
        raise ShapeError(f"{name} must have 3 entries, got {len(items)}")
    return items


def check_range(pair: Sequence[float], name: str, minimum: float = 0) -> None:
    """Validate a (min, max) range."""
    if len(pair) != 2 or pair[0] > pair[1]:
        raise ConfigError(f"{name} must be a non-empty (min, max) range, got {tuple(pair)}")
    if pair[0] < minimum:
        raise ConfigError(f"{name} must start at {minimum} or above, got {pair[0]}")


def is_binary(values: Iterable) -> bool:
    """Check that an array holds only 0 and 1."""
    array = np.asarray(values)
    return bool(np.all((array == 0) | (array == 1)))


def markdown_table(frame) -> str:
    """Render a DataFrame as a markdown table; missing values print as N/A."""
    cleaned = frame.astype(object).where(pd.notna(frame), None)
    return cleaned.to_markdown(index=False, floatfmt=".2f", missingval="N/A")


SEED_HEADER = "# seed="


def write_table(frame: pd.DataFrame, path: str, seed: Optional[int] = None, **kwargs) -> None:
    """
    Write a DataFrame as CSV, under a ``# seed=<n>`` line when a root seed is given.

    Read it back with ``pd.read_csv(path, comment="#")``.
    """
    with open(path, "w", encoding="utf-8", newline="") as handle:
        if seed is not None:
            handle.write(f"{SEED_HEADER}{int(seed)}\n")
        frame.to_csv(handle, index=False, lineterminator="\n", **kwargs)


def read_table_seed(path: str) -> Optional[int]:
    """Root seed recorded in the header line of a table written by ``write_table``."""
    with open(path, encoding="utf-8") as handle:
        first = handle.readline().strip()
    if not first.startswith(SEED_HEADER):
        return None
    return int(first[len(SEED_HEADER):])
