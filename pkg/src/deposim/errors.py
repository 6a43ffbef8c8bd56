"""Exception types shared across the package."""


class DeposimError(Exception):
    """Base class for all package errors."""


class InvalidParams(DeposimError):
    """Model family parameters violate their preconditions."""


class DivisionByZeroRate(DeposimError):
    """A rate needed in a denominator is zero inside the admissible range."""


class ThetaOutOfRange(DeposimError):
    """Requested chemical potential lies outside (theta_lo, theta_hi)."""


class WindowWrap(DeposimError):
    """A moving observation window would wrap around the ring."""


class SpaceTooLarge(DeposimError):
    """Exact state-space enumeration would exceed the size guard."""


class NegativeChannelRate(DeposimError):
    """A coupling channel rate came out negative (monotonicity or
    convexity of the rate function is violated)."""


class StochasticOrderViolation(DeposimError):
    """The quantile coupling produced a pair with lower > upper."""


class Unsupported(DeposimError):
    """No closed form / no implementation for the requested family."""
