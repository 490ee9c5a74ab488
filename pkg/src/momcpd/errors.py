"""Exception hierarchy shared across the package."""


class MomcpdError(Exception):
    """Base class for all package errors."""


class ValidationError(MomcpdError):
    """Input data violates a schema or invariant."""


class ParseError(ValidationError):
    """A file could not be parsed; message names the offending line."""


class InsufficientDataError(MomcpdError):
    """Not enough history to compute the requested quantity."""


class DegenerateWindowError(MomcpdError):
    """Window has (near-)zero variance and cannot be standardized."""


class NonPsdError(MomcpdError):
    """Covariance matrix failed factorization even after jitter escalation."""


class FitFailureError(MomcpdError):
    """GP hyperparameter optimization failed on both attempts."""


class DegenerateBatchError(MomcpdError):
    """Minibatch captured returns have (near-)zero dispersion."""


class ConfigError(MomcpdError):
    """Run configuration is inconsistent or incomplete."""


class MetricUndefinedError(MomcpdError):
    """A performance ratio has a zero denominator (zero std or zero MDD)."""
