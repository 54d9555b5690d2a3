"""Exceptions shared across the package, mapped to CLI exit codes."""


class ConfigError(Exception):
    """Invalid configuration or usage. CLI exit code 1."""

    exit_code = 1


class DataError(Exception):
    """Malformed or insufficient input data. CLI exit code 2."""

    exit_code = 2


class NumericError(Exception):
    """Non-finite loss or other numeric failure. CLI exit code 3."""

    exit_code = 3
