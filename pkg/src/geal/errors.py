"""Exception types shared across the pipeline."""


class GealError(Exception):
    """Base class for all pipeline errors."""


class FormatError(GealError):
    """A file does not conform to the expected binary layout (magic, version, structure)."""


class CorruptionError(GealError):
    """A file conforms structurally but ends mid-record or carries impossible lengths."""


class ValidationError(GealError):
    """A record violates its invariants. Carries the offending image id when known."""

    def __init__(self, message, image_id=None):
        super().__init__(message)
        self.image_id = image_id


class ConfigError(GealError):
    """A configuration value is outside its legal range."""


class DistanceDomainError(GealError):
    """A distance was requested outside its domain (zero vector under cosine)."""
