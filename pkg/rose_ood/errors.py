"""Exception hierarchy shared by the library and the CLI."""

from __future__ import annotations

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class RoseError(Exception):
    """Base class for every error raised by rose_ood."""

    exit_code = EXIT_DATA


class UsageError(RoseError):
    """Invalid command-line usage or argument combination."""

    exit_code = EXIT_USAGE


class ConfigError(RoseError):
    """A configuration value violates its documented range."""

    exit_code = EXIT_USAGE


class ShapeError(RoseError, ValueError):
    """Array shapes do not compose."""

    exit_code = EXIT_DATA


class DataFormatError(RoseError):
    """A file or table could not be parsed."""

    exit_code = EXIT_DATA


class FingerprintMismatchError(DataFormatError):
    """Artifacts were produced from different models."""


class AutodiffError(RoseError):
    """Misuse of the forward/backward protocol."""

    exit_code = EXIT_NUMERIC


class NumericError(RoseError, ArithmeticError):
    """Non-finite values, divergence, or solver failure."""

    exit_code = EXIT_NUMERIC
