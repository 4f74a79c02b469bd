"""Exception types shared across the package."""
from __future__ import annotations


class SemiOPEError(Exception):
    """Base class for package errors."""


class DimensionError(SemiOPEError, ValueError):
    pass


class InvalidPolicyError(SemiOPEError, ValueError):
    pass


class ConfigError(SemiOPEError, ValueError):
    """Bad experiment/environment configuration. ``path`` names the field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class SupportViolation(SemiOPEError):
    """An estimator needed a ratio whose denominator has no support.

    Carries the offending (trajectory, step, state, action) so the CLI can
    report it.
    """

    def __init__(self, message: str, trajectory: int = -1, t: int = -1, state: int = -1, action: int = -1):
        self.trajectory = trajectory
        self.t = t
        self.state = state
        self.action = action
        super().__init__(f"{message} (trajectory={trajectory}, t={t}, s={state}, a={action})")


class InfiniteDivergence(SemiOPEError):
    """KL divergence is infinite: pi_e puts mass where pi_b has none."""
