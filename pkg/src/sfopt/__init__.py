"""Sum of Functions Optimizer with baselines and a benchmark harness."""
from .core import SFO, SFOConfig, StepReport, init, step
from .errors import ConfigError, DegenerateSubspaceError, DomainError
from .problem import (LogisticRegression, ObjectiveProblem, QuadraticEnsemble, build_problem,
                      check_gradient, make_logistic_regression, make_quadratic_ensemble)

__all__ = [
    "SFO", "SFOConfig", "StepReport", "init", "step",
    "ConfigError", "DegenerateSubspaceError", "DomainError",
    "ObjectiveProblem", "QuadraticEnsemble", "LogisticRegression", "build_problem",
    "check_gradient", "make_logistic_regression", "make_quadratic_ensemble",
]
