"""Error types shared across the package."""


class BeliefSimError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(BeliefSimError, ValueError):
    """A configuration value or combination is unusable."""


class InvalidActionError(BeliefSimError, ValueError):
    """An action id outside the discrete action set."""


class InvalidInputError(BeliefSimError, ValueError):
    """A tensor or array input with the wrong shape or domain."""


class InvalidStateError(BeliefSimError, ValueError):
    """A state object inconsistent with the configured variant."""


class PlanFailureError(BeliefSimError, RuntimeError):
    """The scripted policy could not plan a path to its waypoint."""


class NumericFailureError(BeliefSimError, RuntimeError):
    """A non-finite value appeared where finite math was required."""


class UnsupportedHeadError(BeliefSimError, ValueError):
    """An operation that needs a specific head variant got another."""
