"""Objectives written as a sum of subfunctions, plus builtin test problems.

Subfunction indices are zero-based throughout the package.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DomainError

Evaluator = Callable[[int, np.ndarray], "tuple[float, np.ndarray]"]


class ObjectiveProblem:
    """F(x) = sum_i f_i(x) over ``subfunction_count`` pure subfunctions.

    Parameters
    ----------
    dimension : int
        Number of parameters M.
    subfunction_count : int
        Number of subfunctions N.
    evaluator : callable
        ``evaluator(i, x) -> (f_i(x), f_i'(x))``. Must be deterministic and
        free of side effects.
    analytic_optimum : (x_star, F_star), optional
        Known minimizer and minimum, when available.
    """

    def __init__(self, dimension: int, subfunction_count: int, evaluator: Evaluator,
                 analytic_optimum: Optional[tuple] = None, name: str = "problem"):
        if dimension < 1 or subfunction_count < 1:
            raise ConfigError("dimension and subfunction_count must be >= 1")
        self.dimension = int(dimension)
        self.subfunction_count = int(subfunction_count)
        self._evaluator = evaluator
        self.analytic_optimum = analytic_optimum
        self.name = name

    @property
    def M(self) -> int:
        return self.dimension

    @property
    def N(self) -> int:
        return self.subfunction_count

    def eval_subfunction(self, i: int, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Value and gradient of subfunction ``i`` at ``x``.

        Raises ``IndexError`` for an index outside ``[0, N)`` and
        ``DomainError`` when ``x`` has the wrong length or non-finite entries.
        Non-finite outputs are passed through untouched; the optimizer treats
        them as a failed evaluation.
        """
        if not 0 <= i < self.subfunction_count:
            raise IndexError(f"subfunction index {i} outside [0, {self.subfunction_count})")
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dimension,):
            raise DomainError(f"expected x of shape ({self.dimension},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite entries in x")
        value, grad = self._evaluator(i, x)
        return float(value), np.asarray(grad, dtype=float)

    def full_objective(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Sum of all subfunctions, accumulated in ascending index order."""
        total = 0.0
        grad = np.zeros(self.dimension)
        for i in range(self.subfunction_count):
            f, g = self.eval_subfunction(i, x)
            total += f
            grad += g
        return total, grad

    def __call__(self, i: int, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.eval_subfunction(i, x)


def eval_subfunction(problem: ObjectiveProblem, i: int, x) -> tuple[float, np.ndarray]:
    return problem.eval_subfunction(i, x)


def full_objective(problem: ObjectiveProblem, x) -> tuple[float, np.ndarray]:
    return problem.full_objective(x)


# -- quadratic ensemble ------------------------------------------------------

class QuadraticEnsemble(ObjectiveProblem):
    """f_i(x) = 1/2 (x - c_i)^T A_i (x - c_i) with symmetric positive definite A_i."""

    def __init__(self, hessians, centers, name: str = "quadratic"):
        A = np.asarray(hessians, dtype=float)
        c = np.asarray(centers, dtype=float)
        if A.ndim != 3 or c.ndim != 2 or A.shape[0] != c.shape[0] or A.shape[1:] != (c.shape[1],) * 2:
            raise ConfigError("hessians must be (N, M, M) and centers (N, M)")
        self.hessians = A
        self.centers = c
        self._Ac = np.einsum("nij,nj->ni", A, c)
        A_sum = A.sum(axis=0)
        x_star = np.linalg.solve(A_sum, self._Ac.sum(axis=0))
        super().__init__(c.shape[1], c.shape[0], self._evaluate, name=name)
        self.analytic_optimum = (x_star, self.full_objective(x_star)[0])

    def _evaluate(self, i: int, x: np.ndarray):
        r = x - self.centers[i]
        g = self.hessians[i] @ r
        return 0.5 * float(r @ g), g


def random_spd(rng: np.random.Generator, dim: int, condition_number: float) -> np.ndarray:
    """Random orthogonal basis times a log-uniform spectrum spanning [1, cond]."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    if dim == 1:
        eig = np.ones(1)
    else:
        u = np.sort(rng.uniform(0.0, 1.0, dim))
        u[0], u[-1] = 0.0, 1.0
        eig = condition_number ** u
    A = (q * eig) @ q.T
    return 0.5 * (A + A.T)


def make_quadratic_ensemble(seed: int, M: int, N: int, condition_number: float = 100.0) -> QuadraticEnsemble:
    if M < 1 or N < 1:
        raise ConfigError("M and N must be >= 1")
    if not condition_number >= 1.0:
        raise ConfigError("condition_number must be >= 1")
    rng = np.random.default_rng(seed)
    A = np.stack([random_spd(rng, M, condition_number) for _ in range(N)])
    c = rng.standard_normal((N, M))
    return QuadraticEnsemble(A, c, name=f"quadratic(M={M},N={N},cond={condition_number:g})")


# -- logistic regression -----------------------------------------------------

@dataclass
class DatasetSplit:
    """Samples (rows of ``data``), +/-1 labels, and the minibatch of each sample."""

    data: np.ndarray
    labels: np.ndarray
    assignment: np.ndarray
    batches: list = field(default_factory=list)

    @classmethod
    def from_assignment(cls, data, labels, assignment):
        assignment = np.asarray(assignment, dtype=np.int64)
        n = int(assignment.max()) + 1
        batches = [np.flatnonzero(assignment == k) for k in range(n)]
        return cls(np.asarray(data, float), np.asarray(labels, float), assignment, batches)

    def to_csv(self, path) -> None:
        """One sample per row, label in the last column."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            p = self.data.shape[1]
            w.writerow([f"x{k}" for k in range(p)] + ["label"])
            for row, lab in zip(self.data, self.labels):
                w.writerow([repr(float(v)) for v in row] + [int(lab)])


def _split_evenly(rng: np.random.Generator, D: int, N: int) -> np.ndarray:
    assignment = np.empty(D, dtype=np.int64)
    for k, idx in enumerate(np.array_split(rng.permutation(D), N)):
        assignment[idx] = k
    return assignment


class LogisticRegression(ObjectiveProblem):
    """Per-minibatch mean log-loss plus ``(l2 / N) * ||x||^2``.

    Summed over minibatches this is the total minibatch-mean loss plus
    ``l2 * ||x||^2``.
    """

    def __init__(self, split: DatasetSplit, l2_coefficient: float, name: str = "logistic"):
        if l2_coefficient < 0:
            raise ConfigError("l2_coefficient must be >= 0")
        self.split = split
        self.l2_coefficient = float(l2_coefficient)
        self._X = [np.ascontiguousarray(split.data[b]) for b in split.batches]
        self._y = [split.labels[b] for b in split.batches]
        super().__init__(split.data.shape[1], len(split.batches), self._evaluate, name=name)
        self._penalty = self.l2_coefficient / self.subfunction_count

    def _evaluate(self, i: int, x: np.ndarray):
        X, y = self._X[i], self._y[i]
        margin = y * (X @ x)
        loss = np.logaddexp(0.0, -margin).mean()
        # d/dm log(1 + e^-m) = -sigmoid(-m)
        weight = -y * _sigmoid(-margin) / len(y)
        g = X.T @ weight + (2.0 * self._penalty) * x
        return float(loss + self._penalty * (x @ x)), g


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def make_logistic_regression(seed: int, D: int, feature_dim: int, N: int,
                             l2_coefficient: float = 1e-3, label_noise: float = 0.1) -> LogisticRegression:
    """Synthetic linearly separable data with flipped labels.

    Features are Gaussian with per-column scales spread over a decade so the
    problem is moderately ill-conditioned. Labels are the sign of a random
    hyperplane, each flipped with probability ``label_noise``.
    """
    if D < N:
        raise ConfigError(f"need at least one sample per minibatch (D={D} < N={N})")
    if feature_dim < 1 or N < 1:
        raise ConfigError("feature_dim and N must be >= 1")
    rng = np.random.default_rng(seed)
    scales = 10.0 ** -rng.uniform(0.0, 1.0, feature_dim)
    X = rng.standard_normal((D, feature_dim)) * scales
    w_true = rng.standard_normal(feature_dim) / np.sqrt(np.sum(scales ** 2))
    y = np.where(X @ w_true >= 0, 1.0, -1.0)
    y[rng.uniform(size=D) < label_noise] *= -1.0
    split = DatasetSplit.from_assignment(X, y, _split_evenly(rng, D, N))
    return LogisticRegression(split, l2_coefficient,
                              name=f"logistic(D={D},p={feature_dim},N={N},l2={l2_coefficient:g})")


def logistic_reference_optimum(problem: LogisticRegression, tol: float = 1e-10,
                               max_iter: int = 200_000) -> tuple[np.ndarray, float]:
    """Full-batch gradient descent with step 1/L until ||F'|| <= tol.

    L bounds the Hessian: sum over minibatches of ||X_b||_2^2 / (4 S_b) plus
    2 * l2.
    """
    lipschitz = sum(np.linalg.norm(X, 2) ** 2 / (4.0 * len(X)) for X in problem._X)
    lipschitz += 2.0 * problem.l2_coefficient
    x = np.zeros(problem.dimension)
    step = 1.0 / lipschitz
    f, g = problem.full_objective(x)
    for _ in range(max_iter):
        if np.linalg.norm(g) <= tol:
            break
        x = x - step * g
        f, g = problem.full_objective(x)
    else:
        raise RuntimeError(f"gradient descent stalled at ||g||={np.linalg.norm(g):.3e}")
    return x, f


# -- gradient checking -------------------------------------------------------

def check_gradient(problem: ObjectiveProblem, i: int, x, step: float = 1e-6) -> float:
    """Largest coordinate-wise gap between analytic and central-difference
    gradients, relative to the larger of the two gradients' max-norms."""
    if step <= 0:
        raise ConfigError("step must be positive")
    x = np.asarray(x, dtype=float)
    _, g = problem.eval_subfunction(i, x)
    fd = np.empty_like(g)
    xp = x.copy()
    for k in range(x.size):
        xp[k] = x[k] + step
        fp, _ = problem.eval_subfunction(i, xp)
        xp[k] = x[k] - step
        fm, _ = problem.eval_subfunction(i, xp)
        xp[k] = x[k]
        fd[k] = (fp - fm) / (2.0 * step)
    scale = max(np.max(np.abs(g)), np.max(np.abs(fd)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(g - fd)) / scale)


def suggest_minibatch_count(D: int, M: Optional[int] = None, proportionality: float = 1.0) -> int:
    """Number of minibatches N ~ proportionality * sqrt(D), clamped to [1, D].

    Evaluating one minibatch of size S costs O(M S) while projecting its
    gradient into the O(N)-dimensional subspace costs O(M N) = O(M D / S);
    the two balance when S (and hence N) grows like sqrt(D). ``M`` cancels
    out and is accepted only for call-site symmetry.
    """
    if D < 1:
        raise ConfigError("D must be >= 1")
    n = math.floor(proportionality * math.sqrt(D) + 0.5)
    return int(min(max(n, 1), D))


BUILTIN_PROBLEMS = ("quadratic", "logistic")


def build_problem(spec: dict) -> ObjectiveProblem:
    """Construct a builtin problem from a config mapping."""
    kind = spec.get("kind")
    seed = int(spec.get("seed", 0))
    if kind == "quadratic":
        return make_quadratic_ensemble(seed, int(spec.get("M", 20)), int(spec.get("N", 10)),
                                       float(spec.get("condition_number", 100.0)))
    if kind == "logistic":
        return make_logistic_regression(seed, int(spec.get("D", 2000)), int(spec.get("feature_dim", spec.get("M", 100))),
                                        int(spec.get("N", 20)), float(spec.get("l2_coefficient", 1e-3)))
    raise ConfigError(f"unknown problem kind {kind!r}; expected one of {BUILTIN_PROBLEMS}")
