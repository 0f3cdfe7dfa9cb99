"""Per-subfunction BFGS Hessian estimates in subspace coordinates.

An estimate is kept as ``H = diag * I + basis @ excess @ basis.T`` where
``basis`` has at most 2L orthonormal columns spanning the subfunction's
history. The scaled identity covers every direction the history has not
explored, including subspace directions appended later.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError

log = logging.getLogger(__name__)

HISTORY_LENGTH = 10
CURVATURE_EPS = 1e-12
GAMMA = 1e-8
FIRST_HESSIAN_SCALE = 1e6
BETA_EIG_CUTOFF = 1e-12
PINV_RCOND = 1e-10
SPAN_TOL = 1e-12


@dataclass
class HessianEstimate:
    diag: float
    basis: np.ndarray
    excess: np.ndarray
    clipped: int = 0

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    @classmethod
    def scaled_identity(cls, K: int, value: float) -> "HessianEstimate":
        return cls(float(value), np.zeros((K, 0)), np.zeros((0, 0)))

    @classmethod
    def from_dense(cls, H) -> "HessianEstimate":
        H = np.asarray(H, dtype=float)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {H.shape}")
        return cls(0.0, np.eye(H.shape[0]), H.copy())

    @property
    def matrix(self) -> np.ndarray:
        K = self.dim
        H = self.diag * np.eye(K)
        if self.rank:
            H += self.basis @ self.excess @ self.basis.T
        return H

    def restricted(self) -> np.ndarray:
        """H expressed in its own basis, ``basis^T H basis``."""
        return self.excess + self.diag * np.eye(self.rank)

    def eigenvalues(self) -> np.ndarray:
        """Full spectrum, the scaled-identity value repeated K - rank times."""
        inner = np.linalg.eigvalsh(self.restricted()) if self.rank else np.zeros(0)
        return np.sort(np.concatenate([inner, np.full(self.dim - self.rank, self.diag)]))

    def apply(self, v) -> np.ndarray:
        out = self.diag * np.asarray(v, dtype=float)
        if self.rank:
            out = out + self.basis @ (self.excess @ (self.basis.T @ v))
        return out


def median(values) -> float:
    """Median with the midpoint convention for even counts."""
    return float(np.median(np.asarray(values, dtype=float)))


# -- history -------------------------------------------------------------------

@dataclass
class SubfunctionRecord:
    """History of one subfunction in subspace coordinates.

    ``dx`` and ``dg`` hold one difference per row, oldest first.
    """

    K: int
    L: int = HISTORY_LENGTH
    dx: np.ndarray = None
    dg: np.ndarray = None
    last_position: np.ndarray = None
    last_gradient: np.ndarray = None
    last_value: float = np.nan
    last_step: int = -1
    eval_count: int = 0
    model: object = None

    def __post_init__(self):
        if self.dx is None:
            self.dx = np.zeros((0, self.K))
            self.dg = np.zeros((0, self.K))

    @property
    def history_count(self) -> int:
        return self.dx.shape[0]

    @property
    def delta_x(self) -> np.ndarray:
        """K x count matrix of position differences (columns oldest to newest)."""
        return self.dx.T

    @property
    def delta_g(self) -> np.ndarray:
        return self.dg.T


def curvature_ok(dx, dg, eps: float = CURVATURE_EPS) -> bool:
    sy = float(dx @ dg)
    return sy > eps * float(np.sqrt((dx @ dx) * (dg @ dg)))


def append_history(record: SubfunctionRecord, new_position, new_gradient, value: float = np.nan,
                   step: int = -1, eps: float = CURVATURE_EPS) -> bool:
    """Record a fresh evaluation; returns whether a difference pair was stored.

    The first evaluation only sets the reference point. Pairs failing the
    curvature test (including a repeat evaluation at the same position) are
    discarded; the oldest pair falls off once more than L are held.
    """
    new_position = np.asarray(new_position, dtype=float)
    new_gradient = np.asarray(new_gradient, dtype=float)
    stored = False
    if record.eval_count > 0:
        dx = new_position - record.last_position
        dg = new_gradient - record.last_gradient
        if curvature_ok(dx, dg, eps):
            record.dx = np.vstack([record.dx, dx])[-record.L:]
            record.dg = np.vstack([record.dg, dg])[-record.L:]
            stored = True
    record.last_position = new_position.copy()
    record.last_gradient = new_gradient.copy()
    record.last_value = value
    record.last_step = step
    record.eval_count += 1
    return stored


# -- BFGS ----------------------------------------------------------------------

def _pairs(delta_x, delta_g):
    """K x c column matrices -> c x K rows."""
    dx = np.asarray(delta_x, dtype=float)
    dg = np.asarray(delta_g, dtype=float)
    if dx.ndim == 1:
        dx, dg = dx[:, None], dg[:, None]
    if dx.shape != dg.shape:
        raise ValueError("delta_x and delta_g must have the same shape")
    return dx.T, dg.T


def init_beta(delta_x, delta_g) -> float:
    """Smallest nonzero eigenvalue of the minimum-norm symmetric matrix
    consistent with the squared secant equations,
    ``Q = [ (dx^+)^T dg^T dg dx^+ ]^(1/2)``.

    Takes K x c difference matrices (``record.delta_x``, ``record.delta_g``).
    """
    dx, dg = _pairs(delta_x, delta_g)
    if dx.shape[0] == 0:
        raise ValueError("init_beta needs at least one history pair")
    # dx^T (K x c) = U s V^T, so dx^+ = U s^-1 V^T restricted to kept s
    U, s, Vt = np.linalg.svd(dx.T, full_matrices=False)
    keep = s > PINV_RCOND * s[0]
    A = dg.T @ Vt[keep].T / s[keep]
    # eigenvalues of Q^2 restricted to range(dx) are those of A^T A
    lam2 = np.linalg.eigvalsh(A.T @ A)
    lam = np.sqrt(np.clip(lam2, 0.0, None))
    top = lam.max()
    if top <= 0.0:
        raise ValueError("history carries no curvature information")
    return float(lam[lam > BETA_EIG_CUTOFF * top].min())


def bfgs_chain(delta_x, delta_g, beta: float, eps: float = CURVATURE_EPS) -> HessianEstimate:
    """BFGS over the history columns, oldest first, from ``beta * I``.

    The recursion runs in an orthonormal basis for the span of the history,
    so the result is ``beta`` on the orthogonal complement.
    """
    dx, dg = _pairs(delta_x, delta_g)
    if not beta > 0:
        raise ConfigError("beta must be positive")
    K = dx.shape[1]
    if dx.shape[0] == 0:
        return HessianEstimate.scaled_identity(K, beta)
    V = np.ascontiguousarray(np.concatenate([dx, dg]).T)
    Q, _, r = kernels.orthonormalize(V, SPAN_TOL)
    basis = np.ascontiguousarray(Q[:, :r])
    S = np.ascontiguousarray(basis.T @ dx.T)
    Y = np.ascontiguousarray(basis.T @ dg.T)
    B = kernels.bfgs_core(S, Y, float(beta), eps)
    return HessianEstimate(float(beta), basis, B - beta * np.eye(r))


def initial_hessian_no_history(K: int, others_mean=None, others_count: int = 0) -> HessianEstimate:
    """Scaled identity for a subfunction without usable history.

    ``others_mean`` is the average Hessian (K x K) of the other active
    subfunctions that have one. With none, a large constant is used.
    """
    if others_mean is None or others_count == 0:
        return HessianEstimate.scaled_identity(K, FIRST_HESSIAN_SCALE)
    if isinstance(others_mean, HessianEstimate):
        eig = others_mean.eigenvalues()
    else:
        eig = np.linalg.eigvalsh(np.asarray(others_mean, dtype=float))
    return HessianEstimate.scaled_identity(K, median(eig))


def enforce_positive_definite(estimate, gamma: float = GAMMA) -> HessianEstimate:
    """Replace eigenvalues below ``gamma * lambda_max`` by the median positive
    eigenvalue. With no positive eigenvalue at all the identity is returned.
    Accepts a HessianEstimate or a dense symmetric matrix."""
    if not isinstance(estimate, HessianEstimate):
        H = np.asarray(estimate, dtype=float)
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(H), initial=0.0)):
            raise ValueError("enforce_positive_definite needs a symmetric matrix")
        estimate = HessianEstimate.from_dense(0.5 * (H + H.T))
    K, r = estimate.dim, estimate.rank
    n_comp = K - r
    if r:
        w, V = np.linalg.eigh(estimate.restricted())
    else:
        w, V = np.zeros(0), np.zeros((0, 0))
    d = estimate.diag
    lam_max = max(w.max() if r else -np.inf, d if n_comp else -np.inf)
    if not lam_max > 0:
        log.warning("Hessian estimate has no positive eigenvalue; resetting to identity")
        return HessianEstimate(1.0, estimate.basis, np.zeros((r, r)), clipped=K)
    floor = gamma * lam_max
    low_w = w < floor
    low_d = n_comp > 0 and d < floor
    if not low_w.any() and not low_d:
        return estimate
    positive = np.concatenate([w[w > 0], np.full(n_comp if d > 0 else 0, d)])
    fill = median(positive)
    w = np.where(low_w, fill, w)
    new_d = fill if low_d else d
    excess = (V * w) @ V.T - new_d * np.eye(r) if r else np.zeros((0, 0))
    clipped = int(low_w.sum()) + (n_comp if low_d else 0)
    return HessianEstimate(float(new_d), estimate.basis, 0.5 * (excess + excess.T), clipped=clipped)
