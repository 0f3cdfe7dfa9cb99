class ConfigError(ValueError):
    """Invalid sizes, hyperparameters or benchmark configuration."""


class DomainError(ValueError):
    """Non-finite input handed to an evaluator or subspace operation."""


class DegenerateSubspaceError(ValueError):
    """A subspace collapse was asked to span nothing."""
