"""Numba vs numpy timings for the hot kernels, plus an end-to-end SFO run
under each backend.

    python3 benchmarks/bench_kernels.py [--K 60] [--repeats 200] [--no-end-to-end]

Per-kernel timings call the ``*_nb`` and ``*_np`` functions side by side in
one process. The fused kernels (history_hessian, refresh_model) share one
source, so their in-process numpy form still calls the compiled helpers;
the end-to-end numbers run separate interpreters with and without
SFOPT_DISABLE_NUMBA=1 for the true fallback cost.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from sfopt import hessian, kernels
from sfopt._jit import HAS_NUMBA


def best_time(fn, repeats):
    fn()                                  # compile / warm caches
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def kernel_cases(K, N, L, rng):
    R = 2 * L
    V = rng.standard_normal((K, 2 * L))
    S = rng.standard_normal((R, L))
    Y = S + 0.1 * rng.standard_normal((R, L))
    diag = rng.uniform(0.5, 2.0, N)
    U = np.zeros((N, K, R))
    E = np.zeros((N, R, R))
    for i in range(N):
        U[i, :, :R] = np.linalg.qr(rng.standard_normal((K, R)))[0]
        A = rng.standard_normal((R, R))
        E[i] = A @ A.T
    ranks = np.full(N, R, dtype=np.int64)
    x = rng.standard_normal(K)
    pos = rng.standard_normal((N, K))
    act = np.arange(N, dtype=np.int64)
    H = rng.standard_normal((K, K))
    H = H @ H.T + K * np.eye(K)
    Lf = np.linalg.cholesky(H)
    B = rng.standard_normal((K, N))
    T = np.linalg.qr(rng.standard_normal((K, K - 5)))[0].T.copy()
    Aq = rng.standard_normal((K, K))
    Aq = Aq @ Aq.T + np.eye(K)
    DX = rng.standard_normal((L, K))
    DG = DX @ Aq
    hh = (K, R, hessian.GAMMA, hessian.CURVATURE_EPS, hessian.SPAN_TOL, hessian.PINV_RCOND,
          hessian.BETA_EIG_CUTOFF)
    a, g = rng.standard_normal(K), rng.standard_normal(K)
    return {
        "orthonormalize": lambda m: getattr(kernels, f"orthonormalize_{m}")(V, 1e-12),
        "bfgs_core": lambda m: getattr(kernels, f"bfgs_core_{m}")(S, Y, 1.0, 1e-12),
        "lowrank_quadforms": lambda m: getattr(kernels, f"lowrank_quadforms_{m}")(pos, act, diag, U, E, ranks),
        "farthest": lambda m: getattr(kernels, f"farthest_{m}")(x, pos, act, False, H, diag, U, E, ranks),
        "cholesky": lambda m: getattr(kernels, f"cholesky_{m}")(H),
        "cho_solve": lambda m: getattr(kernels, f"cho_solve_{m}")(Lf, B),
        "remap_lowrank": lambda m: getattr(kernels, f"remap_lowrank_{m}")(T, U[0], E[0], R, 1e-12),
        "aggregate_update": lambda m: getattr(kernels, f"lowrank_aggregate_update_{m}")(
            H.copy(), np.zeros(K), 1.0, 1.0, U[0], E[0], R, a, g, 0.0),
        "history_hessian": lambda m: getattr(kernels, f"history_hessian_{m}")(DX, DG, *hh),
    }


END_TO_END = """
import json, time
from sfopt import SFO
from sfopt._jit import backend
from sfopt.problem import make_logistic_regression
p = make_logistic_regression(seed=0, D=2000, feature_dim=100, N=20)
opt = SFO(p)
opt.optimize(num_passes=1)             # compile and warm up
start = time.perf_counter()
opt.optimize(num_passes=5)
print(json.dumps({"backend": backend(), "seconds_per_pass": (time.perf_counter() - start) / 5}))
"""


def end_to_end():
    out = []
    for disable in ("0", "1"):
        env = {**os.environ, "SFOPT_DISABLE_NUMBA": disable}
        proc = subprocess.run([sys.executable, "-c", END_TO_END], capture_output=True, text=True, env=env,
                              check=True)
        out.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--K", type=int, default=60, help="subspace size")
    ap.add_argument("--N", type=int, default=20, help="number of subfunctions")
    ap.add_argument("--L", type=int, default=10, help="history length")
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--no-end-to-end", action="store_true")
    args = ap.parse_args(argv)

    if not HAS_NUMBA:
        print("numba disabled or missing: only the numpy kernels exist, nothing to compare")
    else:
        cases = kernel_cases(args.K, args.N, args.L, np.random.default_rng(0))
        print(f"K={args.K} N={args.N} L={args.L}, median of {args.repeats}")
        print(f"{'kernel':20s} {'numba us':>10s} {'numpy us':>10s} {'speedup':>8s}")
        for name, call in cases.items():
            t_nb = best_time(lambda: call("nb"), args.repeats)
            t_np = best_time(lambda: call("np"), args.repeats)
            print(f"{name:20s} {t_nb * 1e6:10.1f} {t_np * 1e6:10.1f} {t_np / t_nb:8.2f}")
    if not args.no_end_to_end:
        print("\nend to end, logistic D=2000 dim=100 N=20:")
        for r in end_to_end():
            print(f"  {r['backend']:6s} {r['seconds_per_pass'] * 1e3:9.1f} ms/pass")


if __name__ == "__main__":
    main()
