"""Reference optimizers: SGD, SGD with momentum, AdaGrad, SAG and full-batch
LBFGS, plus the hyperparameter grid search used to pick their settings.

The single-step functions are pure. The ``run_*`` drivers draw one
subfunction per step and record the full objective once per pass.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .problem import ObjectiveProblem

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-10
DEFAULT_STEP_GRID = tuple(10.0 ** k for k in range(-5, 3))
DEFAULT_MOMENTUM_GRID = (0.5, 0.9, 0.95, 0.99)
LBFGS_HISTORY = 10
ARMIJO_C = 1e-4
BACKTRACK_FACTOR = 0.5
MAX_BACKTRACK = 40

METHODS = ("sgd", "momentum", "adagrad", "sag", "lbfgs")


class GridEndpointWarning(UserWarning):
    pass


@dataclass
class BaselineConfig:
    method: str
    step_size: float = 1e-2
    momentum: float = 0.0
    history_length: int = LBFGS_HISTORY
    ordering: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if self.ordering not in ("uniform", "cyclic"):
            raise ConfigError("ordering must be 'uniform' or 'cyclic'")

    def label(self) -> str:
        if self.method == "momentum":
            return f"step={self.step_size:g},momentum={self.momentum:g}"
        if self.method == "lbfgs":
            return f"history={self.history_length}"
        return f"step={self.step_size:g}"


@dataclass
class Trace:
    """Full objective after each recorded step. ``evaluations`` counts
    subfunction evaluations so passes = evaluations / N."""

    config: BaselineConfig
    evaluations: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    status: str = "ok"
    x: Optional[np.ndarray] = None

    @property
    def final(self) -> float:
        return self.objective[-1] if self.objective else np.inf


# -- single steps --------------------------------------------------------------

def sgd_step(x, gradient, step_size):
    return x - step_size * gradient


def momentum_step(x, v, gradient, step_size, momentum):
    v_new = momentum * v - step_size * gradient
    return x + v_new, v_new


def adagrad_step(x, accumulator, gradient, initial_step):
    acc = accumulator + gradient * gradient
    return x - initial_step * gradient / np.sqrt(acc + ADAGRAD_EPS), acc


class SAGState:
    """Table of the most recent gradient of every subfunction and their mean."""

    def __init__(self, x, N: int):
        self.x = np.array(x, dtype=float)
        self.N = N
        self.table = np.zeros((N, self.x.size))
        self.total = np.zeros(self.x.size)

    @property
    def mean(self):
        return self.total / self.N

    def refresh_total(self):
        self.total = self.table.sum(axis=0)


def sag_step(state: SAGState, problem: ObjectiveProblem, i: int, step_size: float) -> SAGState:
    _, g = problem.eval_subfunction(i, state.x)
    state.total += g - state.table[i]
    state.table[i] = g
    state.x = state.x - step_size * state.mean
    return state


# -- drivers -------------------------------------------------------------------

def _order(config: BaselineConfig, N: int, steps: int):
    if config.ordering == "cyclic":
        return np.arange(steps) % N
    rng = np.random.Generator(np.random.Philox(config.seed))
    return rng.integers(N, size=steps)


def run_stochastic(problem: ObjectiveProblem, config: BaselineConfig, passes: float, x0=None,
                   record_every: Optional[int] = None, callback: Optional[Callable] = None) -> Trace:
    """SGD / momentum / AdaGrad / SAG for ``passes`` effective passes.

    The full objective is recorded every ``record_every`` steps (default one
    pass) and at the start; divergence stops the run with status "diverged".
    """
    N = problem.N
    steps = int(round(passes * N))
    record_every = record_every or N
    x = np.zeros(problem.M) if x0 is None else np.array(x0, dtype=float)
    v = np.zeros_like(x)
    acc = np.zeros_like(x)
    sag = SAGState(x, N) if config.method == "sag" else None
    trace = Trace(config)
    order = _order(config, N, steps)

    def record(t, x):
        F = problem.full_objective(x)[0]
        trace.evaluations.append(t)
        trace.objective.append(F)
        if callback is not None:
            callback(t, x, F)
        return F

    record(0, x)
    for t in range(steps):
        i = int(order[t])
        if sag is not None:
            sag_step(sag, problem, i, config.step_size)
            x = sag.x
        else:
            _, g = problem.eval_subfunction(i, x)
            if config.method == "sgd":
                x = sgd_step(x, g, config.step_size)
            elif config.method == "momentum":
                x, v = momentum_step(x, v, g, config.step_size, config.momentum)
            else:
                x, acc = adagrad_step(x, acc, g, config.step_size)
        if not np.all(np.isfinite(x)):
            trace.status = "diverged"
            trace.evaluations.append(t + 1)
            trace.objective.append(np.inf)
            break
        if (t + 1) % record_every == 0 or t + 1 == steps:
            if not np.isfinite(record(t + 1, x)):
                trace.status = "diverged"
                break
    trace.x = x
    return trace


def _full_value_grad(problem, x):
    # summed through eval_subfunction so a counting wrapper sees the N evaluations
    f, g = problem.eval_subfunction(0, x)
    g = np.array(g, dtype=float)
    for i in range(1, problem.N):
        fi, gi = problem.eval_subfunction(i, x)
        f += fi
        g += gi
    return float(f), g


def lbfgs_minimize(problem: ObjectiveProblem, x0=None, history_length: int = LBFGS_HISTORY,
                   max_passes: float = 100, gtol: float = 0.0,
                   callback: Optional[Callable] = None) -> Trace:
    """Full-batch LBFGS with backtracking line search (sufficient decrease).

    Every full gradient costs N subfunction evaluations, every line-search
    trial another N. Stops on budget, ``||grad|| <= gtol`` or a failed line
    search (status "line-search-failed").
    """
    N = problem.N
    budget = int(round(max_passes * N))
    x = np.zeros(problem.M) if x0 is None else np.array(x0, dtype=float)
    trace = Trace(BaselineConfig("lbfgs", history_length=history_length))
    f, g = _full_value_grad(problem, x)
    used = N
    trace.evaluations.append(used)
    trace.objective.append(f)
    S, Y = [], []
    while used + N <= budget:
        if np.linalg.norm(g) <= gtol:
            trace.status = "converged"
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((rho, a))
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
            q += (a - rho * (y @ q)) * s
        d = -q
        slope = g @ d
        if not slope < 0:
            d, slope = -g, -(g @ g)
            S, Y = [], []
        step = 1.0
        accepted = False
        for _ in range(MAX_BACKTRACK):
            if used + N > budget:
                break
            x_new = x + step * d
            f_new, g_new = _full_value_grad(problem, x_new)
            used += N
            if np.isfinite(f_new) and f_new <= f + ARMIJO_C * step * slope:
                accepted = True
                break
            step *= BACKTRACK_FACTOR
        if not accepted:
            if used + N <= budget:
                trace.status = "line-search-failed"
            break
        s, y = x_new - x, g_new - g
        if y @ s > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
            if len(S) > history_length:
                S.pop(0)
                Y.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.evaluations.append(used)
        trace.objective.append(f)
        if callback is not None:
            callback(used, x, f)
    trace.x = x
    return trace


def run_baseline(problem: ObjectiveProblem, config: BaselineConfig, passes: float, x0=None,
                 callback: Optional[Callable] = None) -> Trace:
    if config.method == "lbfgs":
        return lbfgs_minimize(problem, x0, config.history_length, passes, callback=callback)
    return run_stochastic(problem, config, passes, x0, callback=callback)


# -- grid search ---------------------------------------------------------------

def default_grid(method: str) -> list[BaselineConfig]:
    if method == "lbfgs":
        return [BaselineConfig("lbfgs")]
    if method == "momentum":
        return [BaselineConfig("momentum", step_size=s, momentum=m)
                for s in DEFAULT_STEP_GRID for m in DEFAULT_MOMENTUM_GRID]
    return [BaselineConfig(method, step_size=s) for s in DEFAULT_STEP_GRID]


def grid_search(method: str, problem: ObjectiveProblem, passes: float,
                grid: Optional[Sequence[BaselineConfig]] = None, seed: int = 0, x0=None):
    """Run every grid point with the same seed; best is the lowest final
    full objective, ties going to the smaller step size.

    Returns ``(best_config, traces)`` with traces in grid order. A best step
    size at either end of the step grid raises GridEndpointWarning.
    """
    grid = list(default_grid(method) if grid is None else grid)
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    traces = []
    for cfg in grid:
        cfg = BaselineConfig(**{**cfg.__dict__, "method": method, "seed": seed})
        traces.append(run_baseline(problem, cfg, passes, x0))
    finals = np.array([t.final if np.isfinite(t.final) else np.inf for t in traces])
    order = sorted(range(len(grid)), key=lambda k: (finals[k], traces[k].config.step_size,
                                                    traces[k].config.momentum))
    best = traces[order[0]].config
    steps = sorted({t.config.step_size for t in traces})
    if method != "lbfgs" and len(steps) > 1 and best.step_size in (steps[0], steps[-1]):
        warnings.warn(f"{method}: best step size {best.step_size:g} is at the edge of the grid",
                      GridEndpointWarning, stacklevel=2)
    return best, traces


def neighbors(best: BaselineConfig, grid: Sequence[BaselineConfig]) -> list[BaselineConfig]:
    """Best configuration plus the step sizes immediately above and below it
    (same momentum)."""
    same = sorted((c for c in grid if c.momentum == best.momentum), key=lambda c: c.step_size)
    steps = [c.step_size for c in same]
    k = steps.index(best.step_size)
    return same[max(k - 1, 0): k + 2]
