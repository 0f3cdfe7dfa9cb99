"""Shared adaptive orthonormal subspace.

The basis is stored row-wise (``K x M``, one basis vector per row) in a
preallocated buffer so appending a direction is a single contiguous write.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateSubspaceError, DomainError

log = logging.getLogger(__name__)

EXPAND_TOL = 1e-8
COLLAPSE_TOL = 1e-10
ORTHO_TOL = 1e-10
ORTHO_CHECK_EVERY = 50


@dataclass
class ProjectionUpdate:
    """What a subspace mutation did to coordinates.

    kind is ``"appended"`` (one new basis vector; old coordinates gain a
    trailing zero), ``"none"``, ``"collapsed"`` or ``"reorthonormalized"``.
    For the last two, vectors map as ``c -> vector_map @ c`` and quadratic
    forms as ``H -> matrix_map @ H @ matrix_map.T``; for a collapse both are
    ``T = P_new^T P_old``.
    """

    kind: str
    column: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None
    vector_map: Optional[np.ndarray] = None
    matrix_map: Optional[np.ndarray] = None

    @property
    def T(self):
        return self.vector_map


class Subspace:
    def __init__(self, M: int, K_max: int, K_min: Optional[int] = None, capacity: Optional[int] = None):
        self.M = int(M)
        self.K_max = int(K_max)
        self.K_min = int(K_min) if K_min is not None else None
        self.capacity = int(capacity) if capacity is not None else min(self.K_max + 2, self.M + 1)
        self._rows = np.zeros((self.capacity, self.M))
        self.K = 0
        self.generation = 0
        self._expansions = 0

    @classmethod
    def from_basis(cls, P, K_max: Optional[int] = None) -> "Subspace":
        P = np.asarray(P, dtype=float)
        M, K = P.shape
        sub = cls(M, K_max if K_max is not None else max(K, 1), capacity=max(K + 2, (K_max or 0) + 2))
        sub._rows[:K] = P.T
        sub.K = K
        return sub

    @property
    def basis(self) -> np.ndarray:
        """The M x K basis matrix P (a view)."""
        return self._rows[: self.K].T

    @property
    def rows(self) -> np.ndarray:
        return self._rows[: self.K]

    def to_full(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=float)
        if coords.shape != (self.K,):
            raise ValueError(f"expected {self.K} coordinates, got shape {coords.shape}")
        if self.K == 0:
            return np.zeros(self.M)
        return coords @ self._rows[: self.K]

    def to_coords(self, full) -> np.ndarray:
        full = np.asarray(full, dtype=float)
        if full.shape != (self.M,):
            raise ValueError(f"expected a length-{self.M} vector, got shape {full.shape}")
        return self._rows[: self.K] @ full

    def orthonormality_error(self) -> float:
        if self.K == 0:
            return 0.0
        rows = self._rows[: self.K]
        return float(np.max(np.abs(rows @ rows.T - np.eye(self.K))))

    def expand(self, v) -> ProjectionUpdate:
        """Append the normalized out-of-subspace component of ``v``.

        The returned update carries ``coords``, the coordinates of ``v`` in the
        (possibly enlarged) basis.
        """
        v = np.asarray(v, dtype=float)
        if v.shape != (self.M,):
            raise ValueError(f"expected a length-{self.M} vector, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("non-finite vector passed to expand")
        K = self.K
        rows = self._rows[:K]
        vnorm = np.sqrt(v @ v)
        h = rows @ v
        q = v - h @ rows
        qnorm = np.sqrt(q @ q)
        if K and qnorm < 0.7071 * vnorm:
            h2 = rows @ q
            q -= h2 @ rows
            h += h2
            qnorm = np.sqrt(q @ q)
        if qnorm <= EXPAND_TOL * vnorm or K >= self.M or vnorm == 0.0:
            return ProjectionUpdate("none", coords=h)
        if K >= self.capacity:
            raise RuntimeError("subspace capacity exceeded; collapse before expanding")
        col = q / qnorm
        self._rows[K] = col
        self.K = K + 1
        self._expansions += 1
        coords = np.empty(K + 1)
        coords[:K] = h
        coords[K] = qnorm
        return ProjectionUpdate("appended", column=col, coords=coords)

    def needs_collapse(self) -> bool:
        return self.K > self.K_max

    def collapse(self, recent_positions: Sequence, recent_gradients: Sequence,
                 extra: Sequence = (), force: bool = False) -> tuple["Subspace", ProjectionUpdate]:
        """Replace the basis by an orthonormal basis for the given vectors.

        Inputs are coordinate vectors in the current basis, taken in the
        order gradients, positions, extra. Dependent inputs (residual below
        ``COLLAPSE_TOL`` of their own norm) are dropped, and so is anything
        beyond the first ``K_max`` independent directions.
        """
        if not force and self.K <= self.K_max:
            raise ValueError(f"collapse requires K > K_max ({self.K} <= {self.K_max})")
        cols = [np.asarray(c, dtype=float)[: self.K] for c in (*recent_gradients, *recent_positions, *extra)]
        if not cols:
            raise DegenerateSubspaceError("no vectors to span")
        V = np.ascontiguousarray(np.stack(cols, axis=1))
        Q, _, rank = kernels.orthonormalize(V, COLLAPSE_TOL)
        if rank == 0:
            raise DegenerateSubspaceError("all collapse inputs are zero")
        rank = min(rank, self.K_max)
        T = np.ascontiguousarray(Q[:, :rank].T)
        new_rows = T @ self._rows[: self.K]
        self._rows[:rank] = new_rows
        self._rows[rank:] = 0.0
        self.K = rank
        self.generation += 1
        # T and the old rows are both orthonormal, so the product is too up to
        # rounding; accumulated drift is caught by maybe_reorthonormalize
        self._expansions = ORTHO_CHECK_EVERY
        return self, ProjectionUpdate("collapsed", vector_map=T, matrix_map=T)

    def maybe_reorthonormalize(self) -> Optional[ProjectionUpdate]:
        """Drift control, run every ``ORTHO_CHECK_EVERY`` expansions."""
        if self._expansions < ORTHO_CHECK_EVERY:
            return None
        self._expansions = 0
        if self.orthonormality_error() <= ORTHO_TOL:
            return None
        return self.reorthonormalize()

    def reorthonormalize(self) -> ProjectionUpdate:
        K = self.K
        Q, R = np.linalg.qr(self._rows[:K].T)
        sign = np.where(np.diag(R) < 0, -1.0, 1.0)
        Q = Q * sign
        R = R * sign[:, None]
        self._rows[:K] = Q.T
        log.debug("re-orthonormalized subspace basis (K=%d)", K)
        return ProjectionUpdate("reorthonormalized", vector_map=R, matrix_map=np.linalg.inv(R).T)

    @staticmethod
    def _compose(first: ProjectionUpdate, second: ProjectionUpdate) -> ProjectionUpdate:
        return ProjectionUpdate(first.kind, vector_map=second.vector_map @ first.vector_map,
                                matrix_map=second.matrix_map @ first.matrix_map)


def expand(subspace: Subspace, full_vector) -> ProjectionUpdate:
    return subspace.expand(full_vector)


def collapse(subspace: Subspace, recent_positions, recent_gradients, extra=()):
    return subspace.collapse(recent_positions, recent_gradients, extra)


def to_full(subspace: Subspace, coords) -> np.ndarray:
    return subspace.to_full(coords)


def to_coords(subspace: Subspace, full) -> np.ndarray:
    return subspace.to_coords(full)
