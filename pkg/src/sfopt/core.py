"""Sum of Functions Optimizer.

Each subfunction f_i gets its own quadratic model g_i (exact value and
gradient at an anchor point, BFGS Hessian from its own history). Every step
minimizes the summed model by a Newton step, evaluates one subfunction at
the new point and refreshes that subfunction's model. All linear algebra
happens in a shared orthonormal subspace holding the recent gradients and
positions, so per-step cost is O(M N) for projections plus small dense work.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import hessian, kernels
from .hessian import HessianEstimate
from .problem import ObjectiveProblem
from .subspace import Subspace

log = logging.getLogger(__name__)

SELECTION_RULES = ("distance", "random", "cyclic")
HISTORY_DROP_RATIO = 1e6
REMAP_TOL = 1e-12


@dataclass
class SFOConfig:
    history_length: int = hessian.HISTORY_LENGTH
    gamma: float = hessian.GAMMA
    alpha: float = 1.0
    initial_active: int = 2
    first_hessian_scale: float = hessian.FIRST_HESSIAN_SCALE
    kmin_factor: int = 2
    kmax_factor: int = 3
    selection: str = "distance"
    seed: int = 0

    def __post_init__(self):
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"selection must be one of {SELECTION_RULES}")
        if self.history_length < 1 or self.initial_active < 1:
            raise ValueError("history_length and initial_active must be >= 1")


@dataclass
class StepReport:
    step: int
    subfunction: int
    bad_update: bool
    eta: float
    K: int
    active: int
    G: float
    collapsed: bool = False
    grew: bool = False


@dataclass
class QuadraticModel:
    """g(x) = value + gradient.(x - anchor) + 1/2 (x - anchor)^T H (x - anchor)."""

    anchor: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: HessianEstimate

    def __call__(self, x) -> float:
        d = np.asarray(x, dtype=float) - self.anchor
        return float(self.value + self.gradient @ d + 0.5 * d @ self.hessian.apply(d))

    def grad(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.anchor
        return self.gradient + self.hessian.apply(d)


class SFO:
    """Optimizer state plus the stepping interface.

    Parameters
    ----------
    problem : ObjectiveProblem
    x0 : array, optional
        Starting point (zeros by default).
    config : SFOConfig, optional
    """

    def __init__(self, problem: ObjectiveProblem, x0=None, config: Optional[SFOConfig] = None, **overrides):
        cfg = config if config is not None else SFOConfig()
        if overrides:
            cfg = SFOConfig(**{**asdict(cfg), **overrides})
        self.config = cfg
        self.problem = problem
        N, M = problem.N, problem.M
        self.N, self.M = N, M
        self.L = cfg.history_length
        self.K_min = cfg.kmin_factor * N
        self.K_max = cfg.kmax_factor * N
        self.subspace = Subspace(M, self.K_max, self.K_min)
        Kc = self.subspace.capacity
        R = 2 * self.L
        self.rng = np.random.Generator(np.random.Philox(cfg.seed))

        self.x = np.zeros(Kc)
        # most recent evaluation of each subfunction
        self.pos = np.zeros((N, Kc))
        self.grad = np.zeros((N, Kc))
        self.val = np.full(N, np.nan)
        self.tau = np.full(N, -1, dtype=np.int64)
        self.nevals = np.zeros(N, dtype=np.int64)
        # quadratic models
        self.has_model = np.zeros(N, dtype=bool)
        self.anchor = np.zeros((N, Kc))
        self.anchor_grad = np.zeros((N, Kc))
        self.anchor_val = np.zeros(N)
        self.h_diag = np.zeros(N)
        self.h_basis = np.zeros((N, Kc, R))
        self.h_excess = np.zeros((N, R, R))
        self.h_rank = np.zeros(N, dtype=np.int64)
        # BFGS history, rows oldest first
        self.hist_dx = np.zeros((N, self.L, Kc))
        self.hist_dg = np.zeros((N, self.L, Kc))
        self.hist_n = np.zeros(N, dtype=np.int64)
        # summed model G(x) = c0 + b.x + 1/2 x^T H x
        self.H = np.zeros((Kc, Kc))
        self.b = np.zeros(Kc)
        self.c0 = 0.0
        self.diag_sum = 0.0
        self._chol = None

        self.active = np.zeros(N, dtype=bool)
        self.active[: min(cfg.initial_active, N)] = True
        self.eta = 1.0
        self.t = 0
        self.evaluations = 0
        self.bad_updates = 0
        self._since_growth = 0
        self._cycle = -1
        self.events: list[dict] = []
        self.active_trace = [int(self.active.sum())]

        if x0 is not None:
            x0 = np.asarray(x0, dtype=float)
            if x0.shape != (M,):
                raise ValueError(f"x0 must have shape ({M},)")
            if np.any(x0 != 0):
                upd = self.subspace.expand(x0)
                self.x[: self.subspace.K] = upd.coords

    # -- views -----------------------------------------------------------

    @property
    def K(self) -> int:
        return self.subspace.K

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def x_coords(self) -> np.ndarray:
        return self.x[: self.K].copy()

    @property
    def x_full(self) -> np.ndarray:
        return self.subspace.to_full(self.x[: self.K])

    def full_objective(self) -> float:
        """F at the current iterate. Out-of-band: not counted as evaluations."""
        return self.problem.full_objective(self.x_full)[0]

    def hessian_of(self, i: int) -> HessianEstimate:
        K, r = self.K, int(self.h_rank[i])
        return HessianEstimate(float(self.h_diag[i]), self.h_basis[i, :K, :r].copy(),
                               self.h_excess[i, :r, :r].copy())

    def model_of(self, i: int) -> QuadraticModel:
        K = self.K
        return QuadraticModel(self.anchor[i, :K].copy(), float(self.anchor_val[i]),
                              self.anchor_grad[i, :K].copy(), self.hessian_of(i))

    def record_of(self, i: int) -> hessian.SubfunctionRecord:
        K, n = self.K, int(self.hist_n[i])
        return hessian.SubfunctionRecord(
            K, self.L, self.hist_dx[i, :n, :K].copy(), self.hist_dg[i, :n, :K].copy(),
            self.pos[i, :K].copy(), self.grad[i, :K].copy(), float(self.val[i]), int(self.tau[i]),
            int(self.nevals[i]), self.model_of(i) if self.has_model[i] else None)

    def G(self, x=None) -> float:
        K = self.K
        x = self.x[:K] if x is None else np.asarray(x, dtype=float)
        return float(self.c0 + self.b[:K] @ x + 0.5 * x @ (self.H[:K, :K] @ x))

    def grad_G(self, x=None) -> np.ndarray:
        K = self.K
        x = self.x[:K] if x is None else np.asarray(x, dtype=float)
        return self.b[:K] + self.H[:K, :K] @ x

    def aggregate_from_scratch(self):
        """(H, b, c0) of the summed model recomputed from the per-subfunction models."""
        K = self.K
        H = np.zeros((K, K))
        b = np.zeros(K)
        c0 = 0.0
        for i in np.flatnonzero(self.has_model):
            Hi, Ha, a, g = self._model_terms(i, K)
            H += Hi
            b += g - Ha
            c0 += self.anchor_val[i] - g @ a + 0.5 * a @ Ha
        return H, b, c0

    def _log(self, kind: str, **info):
        self.events.append({"step": self.t, "kind": kind, **info})

    # -- model bookkeeping -----------------------------------------------------

    def _dense_hessian(self, i: int, K: int) -> np.ndarray:
        r = int(self.h_rank[i])
        H = self.h_diag[i] * np.eye(K)
        if r:
            U = self.h_basis[i, :K, :r]
            H += U @ self.h_excess[i, :r, :r] @ U.T
        return H

    def _model_terms(self, i: int, K: int):
        Hi = self._dense_hessian(i, K)
        a = self.anchor[i, :K]
        return Hi, Hi @ a, a, self.anchor_grad[i, :K]

    def _refresh_aggregate(self):
        K = self.K
        H, b, c0 = self.aggregate_from_scratch()
        self.H[:] = 0.0
        self.b[:] = 0.0
        self.H[:K, :K] = 0.5 * (H + H.T)
        self.b[:K] = b
        self.c0 = c0
        self.diag_sum = float(self.h_diag[self.has_model].sum())
        self._chol = None

    # -- subspace bookkeeping -----------------------------------------------------

    def _on_append(self, k: int):
        """A basis vector was appended at index k: vectors get a zero entry
        for free (buffers are zero-padded); the summed Hessian gains the
        scaled-identity part of every model on its diagonal."""
        self.H[k, k] = self.diag_sum
        self._chol = None

    def _apply_basis_change(self, vec_map: np.ndarray, mat_map: np.ndarray, K_old: int):
        K_new = vec_map.shape[0]
        # positions map with vec_map, gradients (covectors) with mat_map;
        # the two coincide for a collapse
        A, C = vec_map, mat_map
        for arr, mp in ((self.pos, A), (self.anchor, A), (self.grad, C), (self.anchor_grad, C)):
            new = arr[:, :K_old] @ mp.T
            arr[:] = 0.0
            arr[:, :K_new] = new
        x_new = A @ self.x[:K_old]
        self.x[:] = 0.0
        self.x[:K_new] = x_new
        # histories: components leaving the subspace are lost; pairs that
        # shrink by more than HISTORY_DROP_RATIO or lose curvature are dropped
        dx_old = self.hist_dx[:, :, :K_old]
        dg_old = self.hist_dg[:, :, :K_old]
        dx_new = dx_old @ A.T
        dg_new = dg_old @ C.T
        nx_old = np.linalg.norm(dx_old, axis=2)
        ng_old = np.linalg.norm(dg_old, axis=2)
        nx_new = np.linalg.norm(dx_new, axis=2)
        ng_new = np.linalg.norm(dg_new, axis=2)
        sy = np.einsum("nlk,nlk->nl", dx_new, dg_new)
        live = np.arange(self.L)[None, :] < self.hist_n[:, None]
        keep = (live & (nx_new * HISTORY_DROP_RATIO > nx_old) & (ng_new * HISTORY_DROP_RATIO > ng_old)
                & (sy > hessian.CURVATURE_EPS * nx_new * ng_new))
        self.hist_dx[:] = 0.0
        self.hist_dg[:] = 0.0
        if np.array_equal(keep, live):
            self.hist_dx[:, :, :K_new] = np.where(live[:, :, None], dx_new, 0.0)
            self.hist_dg[:, :, :K_new] = np.where(live[:, :, None], dg_new, 0.0)
        else:
            for i in range(self.N):
                m = int(keep[i].sum())
                self.hist_dx[i, :m, :K_new] = dx_new[i][keep[i]]
                self.hist_dg[i, :m, :K_new] = dg_new[i][keep[i]]
            self.hist_n[:] = keep.sum(axis=1)
        B = np.ascontiguousarray(mat_map)
        for i in np.flatnonzero(self.has_model):
            r = int(self.h_rank[i])
            U = self.h_basis[i, :K_old, :].copy()
            self.h_basis[i] = 0.0
            if r:
                U_new, E_new, r2 = kernels.remap_lowrank(B, U, self.h_excess[i], r, REMAP_TOL)
                self.h_basis[i, :K_new, :] = U_new
                self.h_excess[i] = E_new
                self.h_rank[i] = r2
        self._refresh_aggregate()

    def _collapse(self):
        K_old = self.K
        act = np.flatnonzero(self.active & (self.nevals > 0))
        grads = [self.grad[i, :K_old] for i in act]
        positions = [self.pos[i, :K_old] for i in act]
        # the current iterate too: after a bad update it is not the most
        # recent position of any subfunction
        _, upd = self.subspace.collapse(positions, grads, [self.x[:K_old]])
        self._apply_basis_change(upd.vector_map, upd.matrix_map, K_old)
        self._log("collapse", K_old=K_old, K_new=self.K)

    # -- the operations of one step ------------------------------------------

    def _factor(self):
        """Cholesky factor of the summed Hessian, cached until H changes."""
        if self._chol is None:
            K = self.K
            c, ok = kernels.cholesky(np.ascontiguousarray(self.H[:K, :K]))
            if not ok:
                raise np.linalg.LinAlgError("summed Hessian is not numerically positive definite")
            self._chol = c
        return self._chol

    def _solve(self, rhs):
        return kernels.cho_solve(self._factor(), rhs)

    def minimize_G(self) -> np.ndarray:
        """x - eta H^-1 grad G(x): the exact minimizer of the summed model when eta = 1."""
        K = self.K
        x = self.x[:K]
        if not self.has_model.any() or K == 0:
            return x.copy()
        g = self.grad_G(x)
        try:
            delta = -self._solve(g)
        except (np.linalg.LinAlgError, ValueError):
            self._chol = None
            lam_max = float(np.linalg.eigvalsh(self.H[:K, :K]).max())
            delta = -g / lam_max if lam_max > 0 else -g
            self._log("solve_fallback", lam_max=lam_max)
        return x + self.eta * delta

    def choose_subfunction(self) -> int:
        act = np.flatnonzero(self.active)
        fresh = act[self.nevals[act] == 0]
        if fresh.size:
            return int(fresh[0])
        rule = self.config.selection
        if rule == "random":
            return int(act[self.rng.integers(act.size)])
        if rule == "cyclic":
            later = act[act > self._cycle]
            self._cycle = int(later[0] if later.size else act[0])
            return self._cycle
        use_total = bool(self.rng.random() < 0.5)
        k = kernels.farthest(self.x[:self.K], self.pos, act, use_total, self.H, self.h_diag,
                             self.h_basis, self.h_excess, self.h_rank)
        return int(act[k])

    def model_value(self, j: int, x) -> float:
        K = self.K
        d = np.asarray(x, dtype=float) - self.anchor[j, :K]
        r = int(self.h_rank[j])
        quad = self.h_diag[j] * (d @ d)
        if r:
            z = self.h_basis[j, :K, :r].T @ d
            quad += z @ self.h_excess[j, :r, :r] @ z
        return float(self.anchor_val[j] + self.anchor_grad[j, :K] @ d + 0.5 * quad)

    def detect_bad_update(self, j: int, new_value: float, x_new=None, x_old=None) -> bool:
        """True when f_j rose since its last evaluation and its model error
        at the new point exceeds the decrease the summed model predicted."""
        if not np.isfinite(new_value):
            return True
        if not self.has_model[j] or not new_value > self.val[j]:
            return False
        K = self.K
        x_old = self.x[:K] if x_old is None else np.asarray(x_old, dtype=float)
        x_new = np.asarray(x_new, dtype=float)
        step = x_new - x_old
        g_old = self.grad_G(x_old)
        predicted_drop = -(g_old @ step + 0.5 * step @ (self.H[:K, :K] @ step))
        model_error = new_value - self.model_value(j, x_new)
        return bool(model_error > predicted_drop)

    def update_eta(self, success: bool):
        n = self.n_active
        if success:
            self.eta = 1.0 / n + (n - 1.0) / n * self.eta
        else:
            self.eta = 0.5 * self.eta

    def update_model(self, j: int, value: float, gradient_coords, position=None, reanchor: bool = True):
        """Record an evaluation of f_j and rebuild g_j.

        With ``reanchor`` the model is re-centred on the evaluation point;
        otherwise (after a rejected step) only its Hessian is refreshed.
        """
        K = self.K
        p = self.x[:K] if position is None else np.asarray(position, dtype=float)
        g = np.asarray(gradient_coords, dtype=float)
        old_diag = self.h_diag[j] if self.has_model[j] else 0.0
        cfg = self.config
        dc0, clipped = kernels.refresh_model(
            j, K, np.ascontiguousarray(p), np.ascontiguousarray(g), float(value), bool(reanchor),
            self.hist_dx, self.hist_dg, self.hist_n, self.pos, self.grad, self.val, self.nevals,
            self.anchor, self.anchor_grad, self.anchor_val, self.has_model,
            self.h_diag, self.h_basis, self.h_excess, self.h_rank, self.H, self.b,
            cfg.gamma, hessian.CURVATURE_EPS, hessian.SPAN_TOL, hessian.PINV_RCOND,
            hessian.BETA_EIG_CUTOFF, cfg.first_hessian_scale)
        self.c0 += dc0
        self.diag_sum += self.h_diag[j] - old_diag
        self.tau[j] = self.t
        self._chol = None
        if clipped:
            self._log("eigen_clip", subfunction=j, clipped=int(clipped))

    def growth_criterion(self) -> bool:
        """Mean gradient within alpha of its standard error, in the H^-1 metric."""
        act = np.flatnonzero(self.active)
        n = act.size
        if n < 2 or np.any(self.nevals[act] == 0) or not self.has_model.any():
            return False
        K = self.K
        Gm = self.grad[act, :K]
        try:
            sol = self._solve(np.ascontiguousarray(Gm.T))
        except (np.linalg.LinAlgError, ValueError):
            return False
        per = np.einsum("kn,nk->n", sol, Gm)
        mean_grad = Gm.mean(axis=0)
        lhs = float(mean_grad @ sol.mean(axis=1))
        rhs = self.config.alpha * float(per.sum()) / ((n - 1) * n)
        return lhs < rhs

    def grow_active_set(self, bad_update: bool = False) -> bool:
        if self.active.all():
            return False
        self._since_growth += 1
        grow = bad_update or self._since_growth >= self.n_active or self.growth_criterion()
        if grow:
            nxt = int(np.flatnonzero(~self.active)[0])
            self.active[nxt] = True
            self._since_growth = 0
            self._log("grow", subfunction=nxt, active=self.n_active)
        return grow

    def step(self) -> StepReport:
        """One iteration: pick j, Newton step on G, evaluate f_j, refresh g_j."""
        j = self.choose_subfunction()
        K_prev = self.K
        x_prev = self.x[:K_prev].copy()
        x_new = self.minimize_G()
        value, grad_full = self.problem.eval_subfunction(j, self.subspace.to_full(x_new))
        self.evaluations += 1

        finite = np.isfinite(value) and np.all(np.isfinite(grad_full))
        bad = self.detect_bad_update(j, value, x_new, x_prev) if finite else True
        if bad:
            self.bad_updates += 1
            self._log("bad_update", subfunction=j, value=float(value), finite=bool(finite))

        collapsed = False
        if finite:
            upd = self.subspace.expand(grad_full)
            if upd.kind == "appended":
                self._on_append(self.K - 1)
            g_coords = upd.coords
            drift = self.subspace.maybe_reorthonormalize()
            K = self.K
            x_new_k = np.zeros(K)
            x_new_k[:K_prev] = x_new
            if drift is not None:
                self._log("reorthonormalize")
                g_coords = drift.matrix_map @ g_coords
                x_new_k = drift.vector_map @ x_new_k
                self._apply_basis_change(drift.vector_map, drift.matrix_map, K)
            if not bad:
                self.x[:K] = x_new_k
            self.update_model(j, value, g_coords, position=x_new_k, reanchor=not bad)
            if self.K == 0:
                self._seed_axis()
            if self.subspace.needs_collapse():
                self._collapse()
                collapsed = True

        self.update_eta(not bad)
        grew = self.grow_active_set(bad)
        self.active_trace.append(self.n_active)
        self.t += 1
        return StepReport(self.t, j, bad, self.eta, self.K, self.n_active, self.G(), collapsed, grew)

    def _seed_axis(self):
        e1 = np.zeros(self.M)
        e1[0] = 1.0
        self.subspace.expand(e1)
        self._on_append(0)
        self._log("seed_axis")

    def optimize(self, num_passes: float = 10, num_steps: Optional[int] = None) -> np.ndarray:
        steps = num_steps if num_steps is not None else int(round(num_passes * self.N))
        for _ in range(steps):
            self.step()
        return self.x_full


def init(problem: ObjectiveProblem, config: Optional[SFOConfig] = None, x0=None) -> SFO:
    return SFO(problem, x0=x0, config=config)


def step(state: SFO, problem: Optional[ObjectiveProblem] = None) -> StepReport:
    if problem is not None and problem is not state.problem:
        state.problem = problem
    return state.step()
