"""Exception hierarchy shared across the package."""


class BdtdError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(BdtdError, ValueError):
    """Invalid model, roster, or experiment configuration."""


class AggregationError(BdtdError, ValueError):
    """An aggregation rule was called outside its precondition."""


class ConvergenceError(BdtdError, RuntimeError):
    """An iterative oracle failed to converge within its iteration cap."""


class SimulationError(BdtdError, RuntimeError):
    """The protocol engine hit a non-finite parameter or similar fault."""
