class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(Exception):
    """Missing or malformed data on disk."""


class FormatError(DataError):
    """A file does not follow the expected binary layout."""
