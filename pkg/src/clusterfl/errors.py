"""Exception hierarchy shared by every module."""


class ClusterFLError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ClusterFLError, ValueError):
    """Invalid parameters, infeasible partition arithmetic, bad configs."""


class InputError(ClusterFLError, ValueError):
    """Data handed to an operation violates its preconditions."""


class FormatError(ClusterFLError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class CapabilityError(ClusterFLError):
    """The client cannot perform the requested operation (e.g. train without labels)."""


class SamplingError(ClusterFLError):
    """A source pool cannot supply the requested samples."""


class InternalError(ClusterFLError, RuntimeError):
    """Two values that must share a layout do not."""


class UndefinedCorrelationError(ClusterFLError, ValueError):
    """Pearson correlation requested on a zero-variance vector."""
