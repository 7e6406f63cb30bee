"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or incompatible configuration."""


class DataError(ValueError):
    """Malformed, missing, or inconsistent scene data."""


class CheckpointError(ValueError):
    """A checkpoint or plug-in does not match the model it is loaded onto."""
