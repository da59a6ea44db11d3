"""Shared exception types."""


class ConfigError(Exception):
    """Invalid or inconsistent configuration."""


class DataFormatError(Exception):
    """A dataset file failed to parse or carried invalid records."""


class ProtocolError(Exception):
    """A training round could not be executed."""
