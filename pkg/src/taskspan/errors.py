"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""
