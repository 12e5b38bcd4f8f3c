"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class FormatError(ValueError):
    """A file does not match its binary or text layout."""
