"""Shared exception types."""


class MixtrackError(Exception):
    """Base class for all package errors."""


class NumericError(MixtrackError):
    """A tensor op produced or received non-finite values, or an input is
    outside the op's numeric domain (e.g. an unnormalized distribution)."""


class GraphError(MixtrackError):
    """Autodiff graph misuse: backward on a non-scalar, or reuse of a graph
    that has already been freed."""


class ConfigError(MixtrackError):
    """Invalid configuration, plan, or CLI input. Maps to exit code 2."""


class ArchitectureMismatch(MixtrackError):
    """A checkpoint or plan does not match the expected model architecture.
    Maps to exit code 3."""
