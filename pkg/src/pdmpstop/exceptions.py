"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class AbsentRowError(LookupError):
    """A quantized conditional law was requested for a never-visited class."""


class UnsupportedModelError(TypeError):
    """The model lacks a capability required by the operation."""


class GridFileError(ValueError):
    """A persisted artifact is malformed or fails validation."""


class SchemaVersionError(GridFileError):
    """A persisted artifact declares an unsupported schema version."""


class ConfigError(ValueError):
    """A run configuration is invalid."""
