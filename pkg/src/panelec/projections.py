"""Two-way Within projector and related linear-algebra kernels.

The projector removing individual and time effects from an unbalanced
panel is

    Q_D = Q_A - Q_A D_nu Q^- D_nu' Q_A,   Q = D_nu' Q_A D_nu,

where Q_A demeans within individuals and Q^- is a generalized inverse of
the T x T matrix Q.  It is applied matrix-free: one within-individual
demeaning plus a rank-T correction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse.csgraph import connected_components
import scipy.sparse as sp

from .panel import IncidenceSet, StrataAssignment

__all__ = [
    "WithinProjector",
    "StratumSelector",
    "within_projector",
    "generalized_inverse",
    "center",
    "stratum_selector",
]

PINV_RTOL = 1e-10


def generalized_inverse(S, rtol: float = PINV_RTOL, *, return_rank: bool = False):
    """Moore-Penrose inverse of a symmetric positive-semidefinite matrix.

    Eigenvalues below ``rtol`` times the largest are treated as zero.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    top = np.max(np.abs(w)) if w.size else 0.0
    keep = w > rtol * top if top > 0 else np.zeros_like(w, dtype=bool)
    Vk = V[:, keep]
    out = (Vk / w[keep]) @ Vk.T
    if return_rank:
        return out, int(keep.sum())
    return out


def center(v):
    """Subtract the grand mean (column-wise for matrices)."""
    v = np.asarray(v, dtype=float)
    return v - v.mean(axis=0)


@dataclass(frozen=True, eq=False)
class WithinProjector:
    """Matrix-free two-way Within transformation.

    Attributes
    ----------
    inc : IncidenceSet
    Q : ndarray, shape (T, T)
    Q_pinv : ndarray, shape (T, T)
    rank : int
        Rank of ``Q``; ``T - 1`` for a connected panel.
    connected : bool
    """

    inc: IncidenceSet
    Q: np.ndarray
    Q_pinv: np.ndarray
    rank: int
    connected: bool

    @property
    def n(self) -> int:
        return self.inc.index.n

    def demean_individual(self, v) -> np.ndarray:
        """Q_A v: subtract each individual's mean."""
        v = np.asarray(v, dtype=float)
        return v - self.inc.individual_means(v)[self.inc.index.ind]

    @cached_property
    def B(self) -> np.ndarray:
        """Q_A D_nu as a dense n x T array."""
        return self.demean_individual(self.inc.delta_nu.toarray())

    @cached_property
    def BQ(self) -> np.ndarray:
        return self.B @ self.Q_pinv

    def apply(self, v) -> np.ndarray:
        """Q_D v for a vector or an n x k matrix."""
        qa = self.demean_individual(v)
        return qa - self.BQ @ (self.inc.delta_nu.T @ qa)

    __call__ = apply

    @cached_property
    def diagonal(self) -> np.ndarray:
        Ti = self.inc.index.T_i[self.inc.index.ind]
        return 1.0 - 1.0 / Ti - np.einsum("ij,ij->i", self.BQ, self.B)

    @property
    def trace(self) -> float:
        """n - N - rank(Q)."""
        return float(self.diagonal.sum())

    def block(self, rows) -> np.ndarray:
        """Dense principal submatrix Q_D[rows, rows] (rows ascending)."""
        rows = np.asarray(rows)
        ind = self.inc.index.ind[rows]
        same = ind[:, None] == ind[None, :]
        Ti = self.inc.index.T_i[ind]
        qa = np.eye(rows.size) - same / Ti[None, :]
        return qa - self.BQ[rows] @ self.B[rows].T

    def dense(self) -> np.ndarray:
        return self.block(np.arange(self.n))


def within_projector(inc: IncidenceSet) -> WithinProjector:
    """Build the Within projector for a panel.

    A disconnected individual/period graph triggers a warning; the
    pseudoinverse keeps the projector valid in that case.
    """
    idx = inc.index
    dtn = inc.delta_TN
    Q = np.diag(idx.N_t.astype(float)) - (dtn.multiply(1.0 / idx.T_i[None, :]) @ dtn.T).toarray()
    Q = 0.5 * (Q + Q.T)
    Q_pinv, rank = generalized_inverse(Q, return_rank=True)
    graph = sp.bmat([[None, dtn.T], [dtn, None]])
    ncomp, _ = connected_components(graph, directed=False)
    connected = ncomp == 1
    if not connected:
        warnings.warn(
            f"panel is not connected ({ncomp} components); effects are identified "
            "only within components",
            RuntimeWarning,
            stacklevel=2,
        )
    return WithinProjector(inc=inc, Q=Q, Q_pinv=Q_pinv, rank=rank, connected=connected)


@dataclass(frozen=True, eq=False)
class StratumSelector:
    """Row selectors H_a stored as index lists."""

    rows: tuple
    n: int

    def select(self, v, a: int):
        return np.asarray(v)[self.rows[a]]

    def matrix(self, a: int) -> np.ndarray:
        """Dense n_a x n selection matrix."""
        return np.eye(self.n)[self.rows[a]]


def stratum_selector(strata: StrataAssignment) -> StratumSelector:
    return StratumSelector(tuple(strata.rows(a) for a in range(strata.A)), strata.index.n)
