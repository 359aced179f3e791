"""Exception types shared across chromaflow."""


class ChromaflowError(Exception):
    """Base class for all package errors."""


class FormatError(ChromaflowError, ValueError):
    """A file on disk does not match the expected binary or image format."""


class ConfigError(ChromaflowError, ValueError):
    """A run configuration is malformed or names unknown keys."""


class NumericError(ChromaflowError, FloatingPointError):
    """A loss or tensor became non-finite."""
