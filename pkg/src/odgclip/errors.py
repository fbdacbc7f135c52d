"""Exception types shared across the package."""


class ODGError(Exception):
    """Base class for package errors."""


class ConfigurationError(ODGError):
    """Bad or missing configuration (user error)."""


class DataError(ODGError):
    """Malformed or inconsistent data."""


class CheckpointError(ODGError):
    """Unreadable, corrupt or incompatible checkpoint."""


class DivergenceError(ODGError):
    """Training produced a non-finite loss."""


class OpenGenUnavailable(ODGError):
    """The image generation service could not be reached."""
