"""Exception types shared across the package."""


class AgeMdpError(Exception):
    """Base class for all package errors."""


class ModelSpecError(AgeMdpError):
    """Unknown builtin name, inconsistent parameters or a malformed model document."""


class ConfigError(AgeMdpError):
    """Malformed experiment configuration; message carries a location anchor."""


class RowSumViolation(AgeMdpError):
    """Embedded transition row does not sum to one (grid too coarse or the
    lower rate bound is violated)."""


class UndefinedCDF(AgeMdpError):
    """Sojourn CDF requested for a transition with zero embedded probability."""


class DivergentSweep(AgeMdpError):
    """Backward age sweep produced values outside the admissible bound."""


class MaxIterExceeded(AgeMdpError):
    """Iteration limit reached before the requested tolerance."""


class TooLarge(AgeMdpError):
    """Brute-force enumeration would exceed the policy-count cap."""


class NotConverging(AgeMdpError):
    """Vanishing-discount sequence is not Cauchy at the requested tolerance."""


class A6Missing(AgeMdpError):
    """No state is reachable in one jump from every other state, so the
    renewal construction is unavailable."""


class BisectionBracketFailure(AgeMdpError):
    """Cycle criterion has the wrong sign at the bracket end points."""
