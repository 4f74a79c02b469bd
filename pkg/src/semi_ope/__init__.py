"""Counterfactual-augmented importance sampling for semi-offline policy
evaluation."""
from .errors import ConfigError, DimensionError, InvalidPolicyError, SemiOPEError, SupportViolation
from .mdp import Policy, TabularMDP, TrajectoryBatch, exact_policy_value, horizon_q_values

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "InvalidPolicyError", "SemiOPEError", "SupportViolation",
    "Policy", "TabularMDP", "TrajectoryBatch", "exact_policy_value", "horizon_q_values",
    "__version__",
]
