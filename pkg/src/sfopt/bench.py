"""Benchmark harness: convergence traces, overhead scaling, plot data.

The harness owns evaluation counting. Every optimizer sees the problem
through a CountingProblem, and full-objective samples for the trace go to
the underlying problem directly so they never count as work.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import baselines
from .core import SFO, SFOConfig
from .errors import ConfigError
from .problem import (LogisticRegression, ObjectiveProblem, build_problem, check_gradient,
                      logistic_reference_optimum)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRACE_COLUMNS = ("run_id", "optimizer", "hyperparams", "step", "effective_passes", "objective",
                 "objective_minus_fstar", "wall_seconds")
OPTIMIZERS = ("sfo",) + baselines.METHODS
OVERHEAD_REPEATS = 5
UNRELIABLE_SPREAD = 0.5
PLOTDATA_NAME = "plotdata.csv"
SUMMARY_NAME = "summary.json"


def fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


class CountingProblem(ObjectiveProblem):
    """Delegates to ``inner`` and counts subfunction evaluations."""

    def __init__(self, inner: ObjectiveProblem):
        super().__init__(inner.M, inner.N, inner.eval_subfunction, inner.analytic_optimum, inner.name)
        self.inner = inner
        self.count = 0

    def eval_subfunction(self, i, x):
        self.count += 1
        return self.inner.eval_subfunction(i, x)

    def full_objective(self, x):
        # out-of-band: never counted
        return self.inner.full_objective(x)


# -- configuration -------------------------------------------------------------

@dataclass
class OptimizerSpec:
    name: str
    settings: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)

    def cells(self, seed: int) -> list[tuple[str, object]]:
        """(hyperparameter label, config) for every grid point."""
        if self.name == "sfo":
            cfg = SFOConfig(**{"seed": seed, **self.settings})
            label = ",".join(f"{k}={v}" for k, v in sorted(self.settings.items())) or "default"
            return [(label, cfg)]
        base = {"seed": seed, **self.settings}
        if self.grid:
            steps = self.grid.get("step_size", [base.get("step_size", 1e-2)])
            moms = self.grid.get("momentum", [base.get("momentum", 0.0)])
            grid = [baselines.BaselineConfig(self.name, **{**base, "step_size": float(s), "momentum": float(m)})
                    for s in steps for m in moms]
        elif self.settings:
            grid = [baselines.BaselineConfig(self.name, **base)]
        else:
            grid = [baselines.BaselineConfig(**{**asdict(c), "seed": seed})
                    for c in baselines.default_grid(self.name)]
        return [(c.label(), c) for c in grid]


@dataclass
class RunConfig:
    problem: dict
    optimizers: list
    passes: float = 30
    sample_every: Optional[int] = None
    output_dir: str = "bench_out"
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        unknown = set(raw) - {"problem", "optimizers", "passes", "sample_every", "output_dir", "seed",
                              "schema_version"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "problem" not in raw or "optimizers" not in raw:
            raise ConfigError("config needs 'problem' and 'optimizers'")
        opts = []
        for entry in raw["optimizers"]:
            if isinstance(entry, str):
                entry = {"name": entry}
            name = entry.get("name")
            if name not in OPTIMIZERS:
                raise ConfigError(f"unknown optimizer {name!r}; expected one of {OPTIMIZERS}")
            opts.append(OptimizerSpec(name, dict(entry.get("settings", {})), dict(entry.get("grid", {}))))
        passes = float(raw.get("passes", 30))
        if passes < 0:
            raise ConfigError("passes must be >= 0")
        return cls(dict(raw["problem"]), opts, passes, raw.get("sample_every"),
                   str(raw.get("output_dir", "bench_out")), int(raw.get("seed", 0)), version)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "problem": self.problem,
                "optimizers": [asdict(o) for o in self.optimizers], "passes": self.passes,
                "sample_every": self.sample_every, "output_dir": self.output_dir, "seed": self.seed}


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return RunConfig.from_dict(raw)


DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "problem": {"kind": "logistic", "seed": 0, "D": 2000, "feature_dim": 100, "N": 20, "l2_coefficient": 1e-3},
    "optimizers": ["sfo", "sgd", "momentum", "adagrad", "sag", "lbfgs"],
    "passes": 30,
    "seed": 0,
}


# -- convergence runs ----------------------------------------------------------

def reference_optimum(problem: ObjectiveProblem) -> Optional[float]:
    """Analytic or derived F*, when the problem has one."""
    if problem.analytic_optimum is not None:
        return float(problem.analytic_optimum[1])
    if isinstance(problem, LogisticRegression):
        return float(logistic_reference_optimum(problem)[1])
    return None


def _run_sfo(problem: CountingProblem, cfg: SFOConfig, passes: float, sample_every: int, rows: list):
    opt = SFO(problem, config=cfg)
    steps = int(round(passes * problem.N))
    wall = 0.0
    for t in range(steps + 1):
        if t % sample_every == 0 or t == steps:
            rows.append((t, problem.count, opt.full_objective(), wall))
        if t == steps:
            break
        before = problem.count
        start = time.perf_counter()
        opt.step()
        wall += time.perf_counter() - start
        if problem.count - before != 1:
            raise RuntimeError(f"SFO step used {problem.count - before} evaluations")
    return {"bad_updates": opt.bad_updates, "active_trace": opt.active_trace,
            "events": len(opt.events)}


def _run_baseline(problem: CountingProblem, cfg, passes: float, sample_every: int, rows: list):
    start = time.perf_counter()

    def callback(t, x, F):
        step = t if cfg.method != "lbfgs" else len(rows)
        rows.append((step, problem.count, F, time.perf_counter() - start))

    if cfg.method == "lbfgs":
        trace = baselines.lbfgs_minimize(problem, None, cfg.history_length, passes, callback=callback)
        # the starting point is recorded by the optimizer, not the callback
        rows.insert(0, (0, problem.N, trace.objective[0], 0.0))
        rows[:] = [(k, *r[1:]) for k, r in enumerate(rows)]
    else:
        trace = baselines.run_stochastic(problem, cfg, passes, record_every=sample_every, callback=callback)
    return {"status": trace.status}


def _ensure_writable(out_dir: Path):
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable: {exc}") from exc


def run_benchmark(config: RunConfig, out_dir=None, quiet: bool = True) -> dict:
    """Run every (optimizer, hyperparameter) cell and write one CSV per run
    plus ``summary.json``. Returns the summary."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    _ensure_writable(out)
    base_problem = build_problem(config.problem)
    N = base_problem.N
    sample_every = int(config.sample_every or N)
    if sample_every < 1:
        raise ConfigError("sample_every must be >= 1")
    fstar_ref = reference_optimum(base_problem)

    runs = []
    for spec in config.optimizers:
        for k, (label, cfg) in enumerate(spec.cells(config.seed)):
            run_id = f"{spec.name}-{k:03d}"
            problem = CountingProblem(base_problem)
            rows: list = []
            info: dict = {}
            try:
                if config.passes > 0:
                    if spec.name == "sfo":
                        info = _run_sfo(problem, cfg, config.passes, sample_every, rows)
                    else:
                        info = _run_baseline(problem, cfg, config.passes, sample_every, rows)
            except Exception as exc:  # recorded, other runs continue
                log.exception("run %s failed", run_id)
                info = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            runs.append({"run_id": run_id, "optimizer": spec.name, "hyperparams": label,
                         "rows": rows, "info": info, "config": cfg})
            if not quiet:
                final = rows[-1][2] if rows else float("nan")
                print(f"{run_id:14s} {label:32s} final={final:.10g}")

    finals = [r["rows"][-1][2] for r in runs if r["rows"] and np.isfinite(r["rows"][-1][2])]
    if fstar_ref is not None:
        fstar, fstar_source = fstar_ref, "reference"
    elif finals:
        fstar = min(min(row[2] for row in r["rows"] if np.isfinite(row[2])) for r in runs if r["rows"])
        fstar_source = "best-achieved"
    else:
        fstar, fstar_source = None, "none"

    for r in runs:
        with open(out / f"{r['run_id']}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for step, evals, F, wall in r["rows"]:
                w.writerow([r["run_id"], r["optimizer"], r["hyperparams"], step, fmt(evals / N), fmt(F),
                            fmt(F - fstar) if fstar is not None else "", fmt(wall)])

    summary = _summarize(config, runs, fstar, fstar_source)
    with open(out / SUMMARY_NAME, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return summary


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _summarize(config: RunConfig, runs: list, fstar, fstar_source) -> dict:
    best = {}
    for name in dict.fromkeys(r["optimizer"] for r in runs):
        mine = [r for r in runs if r["optimizer"] == name and r["rows"] and np.isfinite(r["rows"][-1][2])]
        if not mine:
            continue
        step = lambda r: getattr(r["config"], "step_size", 0.0)
        mom = lambda r: getattr(r["config"], "momentum", 0.0)
        top = min(mine, key=lambda r: (r["rows"][-1][2], step(r), mom(r)))
        best[name] = {"run_id": top["run_id"], "hyperparams": top["hyperparams"],
                      "final_objective": top["rows"][-1][2]}
    return {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "fstar": fstar,
        "fstar_source": fstar_source,
        "best": best,
        "runs": [{"run_id": r["run_id"], "optimizer": r["optimizer"], "hyperparams": r["hyperparams"],
                  "final_objective": r["rows"][-1][2] if r["rows"] else None,
                  "empty": not r["rows"], **r["info"]} for r in runs],
        "empty_runs": [r["run_id"] for r in runs if not r["rows"]],
    }


# -- overhead scaling ----------------------------------------------------------

def cheap_problem(M: int, N: int, seed: int = 0) -> ObjectiveProblem:
    """Separable quadratics: one O(M) pass per evaluation, nothing else."""
    rng = np.random.default_rng(seed)
    curv = rng.uniform(1.0, 10.0, (N, M))
    centers = rng.standard_normal((N, M))

    def evaluate(i, x):
        r = x - centers[i]
        g = curv[i] * r
        return 0.5 * float(r @ g), g

    return ObjectiveProblem(M, N, evaluate, name=f"cheap(M={M},N={N})")


def _median_eval_seconds(problem: ObjectiveProblem, samples: int = 50) -> float:
    x = np.zeros(problem.M)
    times = []
    for k in range(samples):
        start = time.perf_counter()
        problem.eval_subfunction(k % problem.N, x)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


class _OverheadCell:
    """One warmed-up optimizer on the cheap problem, ready to be timed."""

    def __init__(self, M: int, N: int, warmup_passes: float, seed: int):
        self.M, self.N = M, N
        self.problem = CountingProblem(cheap_problem(M, N, seed))
        self.opt = SFO(self.problem, config=SFOConfig(seed=seed))
        self.opt.optimize(num_passes=warmup_passes)
        self.eval_seconds = _median_eval_seconds(self.problem.inner)
        self.samples: list = []

    def time_passes(self, passes: float):
        before = self.problem.count
        start = time.perf_counter()
        self.opt.optimize(num_passes=passes)
        elapsed = time.perf_counter() - start
        evals = self.problem.count - before
        self.samples.append((elapsed - evals * self.eval_seconds) / passes)

    def result(self) -> dict:
        samples = np.array(self.samples)
        med = float(np.median(samples))
        spread = float((samples.max() - samples.min()) / med) if med > 0 else float("inf")
        return {"M": self.M, "N": self.N, "seconds_per_pass": med,
                "eval_seconds_per_pass": self.eval_seconds * self.N, "spread": spread,
                "reliable": bool(med > 0 and spread <= UNRELIABLE_SPREAD)}


def time_sfo_pass(M: int, N: int, passes: float = 3, repeats: int = OVERHEAD_REPEATS,
                  warmup_passes: float = 12, seed: int = 0) -> dict:
    """Optimizer-only seconds per effective pass, median over ``repeats``.

    Warm-up runs until histories are full and the active set has grown, so
    the timed passes see steady-state cost.
    """
    cell = _OverheadCell(M, N, warmup_passes, seed)
    for _ in range(repeats):
        cell.time_passes(passes)
    return cell.result()


def fit_slope(xs: Sequence[float], ys: Sequence[float]):
    """Least-squares slope of log(y) on log(x); "not-applicable" with fewer
    than two distinct x values."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.unique(xs).size < 2 or np.any(ys <= 0):
        return "not-applicable"
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def measure_overhead(M_list: Sequence[int], N_list: Sequence[int], passes: float = 3,
                     fixed_N: int = 20, fixed_M: int = 10_000, repeats: int = OVERHEAD_REPEATS,
                     seed: int = 0, out_dir=None, warmup_passes: float = 12) -> dict:
    """Sweep M at ``fixed_N`` and N at ``fixed_M``; fit log-log slopes.

    Repeats are interleaved across all cells so slow drift in machine load
    affects every cell alike instead of biasing one end of a sweep.
    """
    cells = {}
    for M, N in [(int(M), fixed_N) for M in M_list] + [(fixed_M, int(N)) for N in N_list]:
        if (M, N) not in cells:
            cells[M, N] = _OverheadCell(M, N, warmup_passes, seed)
    for _ in range(repeats):
        for cell in cells.values():
            cell.time_passes(passes)
    m_rows = [cells[int(M), fixed_N].result() for M in M_list]
    n_rows = [cells[fixed_M, int(N)].result() for N in N_list]
    result = {
        "m_sweep": m_rows, "n_sweep": n_rows,
        "slope_M": fit_slope([r["M"] for r in m_rows], [r["seconds_per_pass"] for r in m_rows]),
        "slope_N": fit_slope([r["N"] for r in n_rows], [r["seconds_per_pass"] for r in n_rows]),
        "fixed_N": fixed_N, "fixed_M": fixed_M, "repeats": repeats,
    }
    result["reliable"] = all(r["reliable"] for r in m_rows + n_rows)
    if out_dir is not None:
        out = Path(out_dir)
        _ensure_writable(out)
        with open(out / "overhead.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("sweep", "M", "N", "seconds_per_pass", "eval_seconds_per_pass", "spread", "reliable"))
            for sweep, rows in (("M", m_rows), ("N", n_rows)):
                for r in rows:
                    w.writerow((sweep, r["M"], r["N"], fmt(r["seconds_per_pass"]),
                                fmt(r["eval_seconds_per_pass"]), fmt(r["spread"]), r["reliable"]))
        with open(out / "overhead.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


# -- plot data -----------------------------------------------------------------

class MergeError(ValueError):
    pass


def emit_plot_data(trace_dir, out_path=None) -> Path:
    """Merge per-run CSVs into one long-form table with an ``is_best`` column."""
    trace_dir = Path(trace_dir)
    out_path = Path(out_path) if out_path is not None else trace_dir / PLOTDATA_NAME
    files = sorted(p for p in trace_dir.glob("*.csv") if p.name not in (PLOTDATA_NAME, "overhead.csv"))
    if not files:
        raise MergeError(f"no trace files in {trace_dir}")
    owners: dict = {}
    rows = []
    for path in files:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
                raise MergeError(f"{path.name}: unexpected columns {reader.fieldnames}")
            ids = set()
            for row in reader:
                ids.add(row["run_id"])
                rows.append(row)
        ids = ids or {path.stem}
        for rid in ids:
            owners.setdefault(rid, []).append(path.name)
    dup = {rid: names for rid, names in owners.items() if len(names) > 1}
    if dup:
        listing = "; ".join(f"{rid}: {', '.join(n)}" for rid, n in sorted(dup.items()))
        raise MergeError(f"run ids appear in more than one file: {listing}")

    best_ids = set()
    summary = trace_dir / SUMMARY_NAME
    if summary.exists():
        best_ids = {b["run_id"] for b in json.loads(summary.read_text())["best"].values()}
    else:
        finals = {}
        for row in rows:
            finals[row["run_id"]] = row
        by_opt: dict = {}
        for rid, row in finals.items():
            val = float(row["objective"]) if row["objective"] else math.inf
            by_opt.setdefault(row["optimizer"], []).append((val, rid))
        best_ids = {min(v)[1] for v in by_opt.values()}

    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS + ("is_best",))
        for row in rows:
            w.writerow([row[c] for c in TRACE_COLUMNS] + [int(row["run_id"] in best_ids)])
    return out_path


# -- gradient check ------------------------------------------------------------

def gradcheck(problem_spec: dict, points: int = 100, seed: int = 0, scale: float = 1.0) -> dict:
    """check_gradient at ``points`` random (point, subfunction) pairs."""
    problem = build_problem(problem_spec)
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(points):
        x = scale * rng.standard_normal(problem.M)
        i = int(rng.integers(problem.N))
        errors.append(check_gradient(problem, i, x))
    return {"problem": problem.name, "points": points, "max_error": float(max(errors)),
            "median_error": float(np.median(errors))}
