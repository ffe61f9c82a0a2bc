"""Canonical panel layout: observation order, strata and incidence matrices.

Rows are always ordered individual-major, period-minor.  Individual,
period and stratum ids are opaque; internally they are replaced by dense
0-based codes, and the original labels are kept for reporting.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import PanelStructureError

__all__ = [
    "PanelIndex",
    "StrataAssignment",
    "IncidenceSet",
    "build_panel_index",
    "assign_strata",
    "build_incidence",
]


def _sorted_labels(values):
    labels = sorted(set(values))
    return tuple(labels), {lab: k for k, lab in enumerate(labels)}


@dataclass(frozen=True, eq=False)
class PanelIndex:
    """Row layout of an unbalanced panel.

    Attributes
    ----------
    ids, periods : tuple
        Sorted individual and period labels.
    ind, per : ndarray of int
        Individual and period code of each canonical row.
    source_order : ndarray of int
        ``source_order[r]`` is the position in the caller's input of
        canonical row ``r``.
    """

    ids: tuple
    periods: tuple
    ind: np.ndarray
    per: np.ndarray
    source_order: np.ndarray

    @property
    def n(self) -> int:
        return self.ind.shape[0]

    @property
    def N(self) -> int:
        return len(self.ids)

    @property
    def T(self) -> int:
        return len(self.periods)

    @cached_property
    def T_i(self) -> np.ndarray:
        """Observation count per individual."""
        return np.bincount(self.ind, minlength=self.N)

    @cached_property
    def N_t(self) -> np.ndarray:
        """Individual count per period."""
        return np.bincount(self.per, minlength=self.T)

    @cached_property
    def starts(self) -> np.ndarray:
        """Row offsets: individual ``i`` occupies ``starts[i]:starts[i+1]``."""
        return np.concatenate(([0], np.cumsum(self.T_i)))

    @cached_property
    def N_p(self) -> np.ndarray:
        """``N_p[p-1]`` individuals are observed exactly ``p`` times."""
        return np.bincount(self.T_i, minlength=self.T + 1)[1:]

    @cached_property
    def C_p(self) -> np.ndarray:
        return np.cumsum(self.N_p)

    def duration_group(self, p: int) -> np.ndarray:
        """Individuals observed exactly ``p`` times (I_p)."""
        return np.flatnonzero(self.T_i == p)

    def rows_of(self, i: int) -> slice:
        return slice(self.starts[i], self.starts[i + 1])

    def to_mask(self) -> np.ndarray:
        """N x T boolean presence matrix."""
        mask = np.zeros((self.N, self.T), dtype=bool)
        mask[self.ind, self.per] = True
        return mask

    @classmethod
    def from_mask(cls, mask) -> "PanelIndex":
        """Panel with integer labels 0..N-1, 0..T-1 from a presence matrix."""
        mask = np.asarray(mask, dtype=bool)
        ind, per = np.nonzero(mask)
        if ind.size == 0:
            raise PanelStructureError("panel has no observations")
        present_i = np.flatnonzero(mask.any(axis=1))
        present_t = np.flatnonzero(mask.any(axis=0))
        if present_i.size != mask.shape[0] or present_t.size != mask.shape[1]:
            raise PanelStructureError("every individual and period needs an observation")
        return cls(
            ids=tuple(range(mask.shape[0])),
            periods=tuple(range(mask.shape[1])),
            ind=ind.astype(np.intp),
            per=per.astype(np.intp),
            source_order=np.arange(ind.size),
        )


def build_panel_index(observations) -> PanelIndex:
    """Canonical row order for a list of ``(individual, period)`` pairs.

    Raises
    ------
    PanelStructureError
        On empty input or a repeated ``(individual, period)`` pair.
    """
    obs = list(observations)
    if not obs:
        raise PanelStructureError("panel has no observations")
    try:
        ids, id_map = _sorted_labels(o[0] for o in obs)
        periods, per_map = _sorted_labels(o[1] for o in obs)
    except TypeError as exc:
        raise PanelStructureError(f"ids must be mutually orderable: {exc}") from None
    ind = np.fromiter((id_map[o[0]] for o in obs), dtype=np.intp, count=len(obs))
    per = np.fromiter((per_map[o[1]] for o in obs), dtype=np.intp, count=len(obs))
    order = np.lexsort((per, ind))
    ind, per = ind[order], per[order]
    dup = (np.diff(ind) == 0) & (np.diff(per) == 0)
    if dup.any():
        r = int(np.flatnonzero(dup)[0])
        raise PanelStructureError(
            f"duplicate observation for individual {ids[ind[r]]!r}, period {periods[per[r]]!r}"
        )
    return PanelIndex(ids=ids, periods=periods, ind=ind, per=per, source_order=order)


@dataclass(frozen=True, eq=False)
class StrataAssignment:
    """Partition of individuals into strata.

    ``of_individual[i]`` is the 0-based stratum code of individual ``i``;
    ``labels[a]`` is its external name.
    """

    index: PanelIndex
    labels: tuple
    of_individual: np.ndarray

    @property
    def A(self) -> int:
        return len(self.labels)

    @cached_property
    def of_row(self) -> np.ndarray:
        return self.of_individual[self.index.ind]

    @cached_property
    def N_a(self) -> np.ndarray:
        return np.bincount(self.of_individual, minlength=self.A)

    @cached_property
    def n_a(self) -> np.ndarray:
        return np.bincount(self.of_individual, weights=self.index.T_i, minlength=self.A).astype(np.intp)

    def members(self, a: int) -> np.ndarray:
        """Individuals in stratum ``a`` (I_a)."""
        return np.flatnonzero(self.of_individual == a)

    @cached_property
    def _rows(self) -> list:
        return [np.flatnonzero(self.of_row == a) for a in range(self.A)]

    def rows(self, a: int) -> np.ndarray:
        """Row indices of stratum ``a``, ascending."""
        return self._rows[a]

    def periods_of(self, a: int) -> np.ndarray:
        """Periods with at least one observation from stratum ``a`` (J_a)."""
        return np.unique(self.index.per[self.rows(a)])

    def group(self, a: int, p: int) -> np.ndarray:
        """Individuals of stratum ``a`` observed exactly ``p`` times (I_{a,p})."""
        return np.flatnonzero((self.of_individual == a) & (self.index.T_i == p))


def assign_strata(index: PanelIndex, mapping=None, *, values=None, count: int = 10) -> StrataAssignment:
    """Assign every individual to a stratum.

    Parameters
    ----------
    index : PanelIndex
    mapping : Mapping, optional
        Explicit ``individual id -> stratum label``.  Labels are sorted to
        fix the stratum order.
    values : array_like, optional
        One value per individual, in ``index.ids`` order.  Individuals are
        ranked by value (ties by id) and cut into ``count`` groups of equal
        size, so ``count=10`` gives deciles.  Stratum labels are ``1..count``.
    count : int
        Number of quantile groups when ``values`` is given.
    """
    if (mapping is None) == (values is None):
        raise ValueError("pass exactly one of mapping or values")
    if mapping is not None:
        if not isinstance(mapping, Mapping):
            mapping = dict(mapping)
        missing = [i for i in index.ids if i not in mapping]
        if missing:
            raise PanelStructureError(f"individual {missing[0]!r} has no stratum")
        labels, lab_map = _sorted_labels(mapping[i] for i in index.ids)
        codes = np.array([lab_map[mapping[i]] for i in index.ids], dtype=np.intp)
        return StrataAssignment(index, labels, codes)

    values = np.asarray(values, dtype=float)
    if values.shape != (index.N,):
        raise ValueError(f"values must have one entry per individual ({index.N})")
    if not 1 <= count <= index.N:
        raise ValueError("count must lie in 1..N")
    rank = np.empty(index.N, dtype=np.intp)
    rank[np.argsort(values, kind="stable")] = np.arange(index.N)
    codes = rank * count // index.N
    return StrataAssignment(index, tuple(range(1, count + 1)), codes)


@dataclass(frozen=True, eq=False)
class IncidenceSet:
    """Indicator matrices of a stratified panel, stored sparse.

    ``delta_N``, ``delta_T`` and ``delta_A`` are diagonal and are returned
    as 1-d arrays of their diagonals.
    """

    index: PanelIndex
    strata: StrataAssignment

    def _indicator(self, codes, width):
        n = codes.shape[0]
        return sp.csr_matrix((np.ones(n), (np.arange(n), codes)), shape=(n, width))

    @cached_property
    def delta_mu(self) -> sp.csr_matrix:
        return self._indicator(self.index.ind, self.index.N)

    @cached_property
    def delta_nu(self) -> sp.csr_matrix:
        return self._indicator(self.index.per, self.index.T)

    @cached_property
    def delta_alpha(self) -> sp.csr_matrix:
        return self._indicator(self.strata.of_row, self.strata.A)

    @property
    def delta_N(self) -> np.ndarray:
        return self.index.T_i

    @property
    def delta_T(self) -> np.ndarray:
        return self.index.N_t

    @property
    def delta_A(self) -> np.ndarray:
        return self.strata.n_a

    @cached_property
    def delta_TN(self) -> sp.csr_matrix:
        return (self.delta_nu.T @ self.delta_mu).tocsr()

    @cached_property
    def delta_AN(self) -> sp.csr_matrix:
        N = self.index.N
        return sp.csr_matrix(
            (np.ones(N), (self.strata.of_individual, np.arange(N))), shape=(self.strata.A, N)
        )

    @cached_property
    def N_ta(self) -> np.ndarray:
        """T x A matrix of individual counts per period and stratum."""
        out = np.zeros((self.index.T, self.strata.A))
        np.add.at(out, (self.index.per, self.strata.of_row), 1.0)
        return out

    @cached_property
    def lambdas(self) -> dict:
        """Scalar and per-stratum lambda constants of the QUE expectations."""
        n = self.index.n
        Ti = self.index.T_i.astype(float)
        Nt = self.index.N_t.astype(float)
        A = self.strata.A
        return {
            "mu": float(Ti @ Ti) / n,
            "nu": float(Nt @ Nt) / n,
            "mu_a": np.bincount(self.strata.of_individual, weights=Ti**2, minlength=A) / n,
            "nu_a": (Nt @ self.N_ta) / n,
        }

    def individual_means(self, v) -> np.ndarray:
        """Per-individual means of the rows of ``v`` (vector or matrix)."""
        v = np.asarray(v, dtype=float)
        s = self.delta_mu.T @ v
        Ti = self.index.T_i
        return s / (Ti if v.ndim == 1 else Ti[:, None])

    def period_means(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        s = self.delta_nu.T @ v
        Nt = self.index.N_t
        return s / (Nt if v.ndim == 1 else Nt[:, None])


def build_incidence(index: PanelIndex, strata: StrataAssignment) -> IncidenceSet:
    """Indicator matrices for ``index`` stratified by ``strata``."""
    if strata.index is not index:
        if strata.of_individual.shape != (index.N,):
            raise PanelStructureError("strata do not match the panel")
        strata = StrataAssignment(index, strata.labels, strata.of_individual)
    return IncidenceSet(index, strata)
