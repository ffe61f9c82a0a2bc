"""Two-way SUR systems on unbalanced stratified panels.

Each of the M equations has its own regressors and intercept; coefficient
columns may be shared across equations (cross-equation restrictions).
The disturbance of individual i in stratum a, stacked period-major and
equation-minor over its p observed periods, has covariance

    Omega_{a,p} = E_p (x) (Psi_a + Sigma_nu) + Jbar_p (x) (Psi_a + Sigma_nu + p Phi_a)

with E_p = I_p - Jbar_p and Jbar_p = J_p / p.  Covariance components are
estimated either by QUE (pairwise extension of the single-equation
formulas) or by the within-between (WB) moment procedure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateStratum, NotPD
from .panel import IncidenceSet
from .projections import WithinProjector
from .single import (
    FitReport,
    Regime,
    _checked_inverse,
    _row_stats,
    _within_state,
    que_moments,
    que_solve,
)

__all__ = [
    "SurDesign",
    "SurComponents",
    "OmegaBlock",
    "sur_within_residuals",
    "que_sur_components",
    "wb_sur_components",
    "omega_block",
    "sur_gls",
    "psd_repair",
    "que_sur_moments",
    "wb_moments",
    "wb_expectations",
]


@dataclass(frozen=True, eq=False)
class SurDesign:
    """Regressors of an M-equation system.

    Attributes
    ----------
    X : tuple of ndarray
        Per-equation n x (k_m - 1) regressors, intercept excluded.
    equation_names : tuple of str
    regressor_names : tuple of tuple of str
    columns : tuple of ndarray
        For equation m, the global coefficient index of its intercept
        followed by those of its regressors.
    coef_names : tuple of str
        Names of the K distinct coefficients.
    """

    X: tuple
    equation_names: tuple
    regressor_names: tuple
    columns: tuple
    coef_names: tuple

    @property
    def M(self) -> int:
        return len(self.X)

    @property
    def K(self) -> int:
        return len(self.coef_names)

    @property
    def n(self) -> int:
        return self.X[0].shape[0]

    @property
    def restricted(self) -> bool:
        return self.K < sum(x.shape[1] + 1 for x in self.X)

    @classmethod
    def build(cls, X, regressor_names=None, equation_names=None, restrictions=None) -> "SurDesign":
        """Assemble a design.

        Parameters
        ----------
        X : sequence of array_like
            One n x (k_m - 1) regressor matrix per equation.
        regressor_names, equation_names : optional
            Defaults are ``x1, x2, ...`` and ``y1, y2, ...``.
        restrictions : mapping, optional
            ``shared name -> [(equation, regressor), ...]``; the listed
            coefficients are constrained equal.
        """
        Xs = []
        for x in X:
            x = np.asarray(x, dtype=float)
            Xs.append(np.ascontiguousarray(x[:, None] if x.ndim == 1 else x))
        if not Xs or len({x.shape[0] for x in Xs}) != 1:
            raise ValueError("need at least one equation, all with the same number of rows")
        M = len(Xs)
        eqs = tuple(equation_names) if equation_names is not None else tuple(f"y{m + 1}" for m in range(M))
        if regressor_names is None:
            regs = tuple(tuple(f"x{j + 1}" for j in range(x.shape[1])) for x in Xs)
        else:
            regs = tuple(tuple(r) for r in regressor_names)
        if len(eqs) != M or len(regs) != M or any(len(r) != x.shape[1] for r, x in zip(regs, Xs)):
            raise ValueError("names do not match the regressor matrices")

        shared = {}
        for name, members in (restrictions or {}).items():
            members = list(members)
            if len(members) < 2:
                raise ValueError(f"restriction {name!r} needs at least two coefficients")
            for eq, var in members:
                if eq not in eqs:
                    raise ValueError(f"restriction {name!r}: unknown equation {eq!r}")
                if var != "const" and var not in regs[eqs.index(eq)]:
                    raise ValueError(f"restriction {name!r}: {eq!r} has no regressor {var!r}")
                if (eq, var) in shared:
                    raise ValueError(f"coefficient {eq}:{var} appears in two restrictions")
                shared[(eq, var)] = name

        coef_names: list = []
        lookup: dict = {}
        columns = []
        for eq, r in zip(eqs, regs):
            cols = []
            for var in ("const",) + r:
                key = shared.get((eq, var), f"{eq}:{var}")
                if key not in lookup:
                    lookup[key] = len(coef_names)
                    coef_names.append(key)
                cols.append(lookup[key])
            if len(set(cols)) != len(cols):
                raise ValueError(f"equation {eq!r} uses a shared coefficient twice")
            columns.append(np.array(cols, dtype=np.intp))
        return cls(tuple(Xs), eqs, regs, tuple(columns), tuple(coef_names))

    def stacked(self) -> np.ndarray:
        """n x M x K array: row m of observation r is X_{m,r} in global columns."""
        out = np.zeros((self.n, self.M, self.K))
        for m, (x, cols) in enumerate(zip(self.X, self.columns)):
            out[:, m, cols[0]] = 1.0
            out[:, m, cols[1:]] = x
        return out


@dataclass(frozen=True, eq=False)
class SurComponents:
    """Estimated M x M covariance components.

    ``Psi`` and ``Phi`` are A x M x M stacks or ``None`` when the regime
    keeps that component homoscedastic.  Stored matrices are PSD repaired;
    ``raw`` keeps the estimates before clipping and repair, and
    ``repaired`` lists the components the repair changed.
    """

    procedure: str
    regime: Regime
    Sigma_u: np.ndarray
    Sigma_mu: np.ndarray
    Sigma_nu: np.ndarray
    Psi: np.ndarray | None = None
    Phi: np.ndarray | None = None
    raw: dict = field(default_factory=dict)
    repaired: tuple = ()
    moments: dict = field(default_factory=dict, repr=False)

    @property
    def M(self) -> int:
        return self.Sigma_u.shape[0]

    def psi_stack(self, A: int) -> np.ndarray:
        return self.Psi if self.Psi is not None else np.broadcast_to(self.Sigma_u, (A,) + self.Sigma_u.shape)

    def phi_stack(self, A: int) -> np.ndarray:
        return self.Phi if self.Phi is not None else np.broadcast_to(self.Sigma_mu, (A,) + self.Sigma_mu.shape)


def psd_repair(S, floor: float = 1e-8):
    """Project a symmetric estimate onto the PSD cone.

    Negative diagonal entries are set to zero, then eigenvalues below
    ``floor`` times the trace are raised to that level.  Returns the
    repaired matrix and whether anything changed beyond rounding.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    d = np.diag(S)
    neg = d < 0
    out = S.copy()
    out[np.diag_indices_from(out)] = np.clip(d, 0.0, None)
    tr = float(np.trace(out))
    if tr == 0.0:
        # nothing to scale a floor by: fall back to a tiny identity
        return floor * np.eye(out.shape[0]), True
    w, V = np.linalg.eigh(out)
    lo = floor * tr
    if w[0] < lo:
        out = (V * np.maximum(w, lo)) @ V.T
        out = 0.5 * (out + out.T)
    return out, bool(neg.any() or w[0] < -1e-12 * tr)


@dataclass(frozen=True, eq=False)
class OmegaBlock:
    """Covariance of one individual's stacked disturbances."""

    a: int
    p: int
    V1_inv: np.ndarray
    V2_inv: np.ndarray
    V1: np.ndarray
    V2: np.ndarray

    def dense(self) -> np.ndarray:
        E, J = _ej(self.p)
        return np.kron(E, self.V1) + np.kron(J, self.V2)

    def inverse(self) -> np.ndarray:
        E, J = _ej(self.p)
        return np.kron(E, self.V1_inv) + np.kron(J, self.V2_inv)


def _ej(p):
    J = np.full((p, p), 1.0 / p)
    return np.eye(p) - J, J


def _spd_inverse(V, a, p):
    try:
        c = sla.cho_factor(V)
    except np.linalg.LinAlgError:
        raise NotPD("Omega block is not positive definite", stratum=a, duration=p) from None
    inv = sla.cho_solve(c, np.eye(V.shape[0]))
    return 0.5 * (inv + inv.T)


def omega_block(components: SurComponents, a: int, p: int, A: int | None = None) -> OmegaBlock:
    """Omega_{a,p} and its inverse from two M x M inverses.

    ``a`` is the 0-based stratum code.
    """
    A = a + 1 if A is None else A
    psi = components.psi_stack(A)[a]
    phi = components.phi_stack(A)[a]
    V1 = psi + components.Sigma_nu
    V2 = V1 + p * phi
    return OmegaBlock(a, p, _spd_inverse(V1, a, p), _spd_inverse(V2, a, p), V1, V2)


def _as_columns(Y, M, n):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape == (M, n) and Y.shape != (n, M):
        Y = Y.T
    if Y.shape != (n, M):
        raise ValueError(f"Y must be n x M = {n} x {M}")
    return np.ascontiguousarray(Y)


def sur_within_residuals(design: SurDesign, Y, proj: WithinProjector):
    """Equation-by-equation Within fits.

    Returns the per-equation :class:`WithinState` objects and the n x M
    matrix of centered residuals f.  Restrictions are ignored here.
    """
    Y = _as_columns(Y, design.M, design.n)
    states = [
        _within_state(x, Y[:, m], proj, names, equation=design.equation_names[m])
        for m, (x, names) in enumerate(zip(design.X, design.regressor_names))
    ]
    F = np.column_stack([s.f for s in states])
    return states, F


def _assemble(procedure, regime, raw, moments, A):
    repaired = []
    out = {}
    for key in ("Sigma_u", "Sigma_mu", "Sigma_nu"):
        out[key], ch = psd_repair(raw[key])
        if ch:
            repaired.append(key)
    psi = phi = None
    if regime.hetero_u:
        reps = [psd_repair(raw["Psi"][a]) for a in range(A)]
        psi = np.stack([r[0] for r in reps])
        if any(r[1] for r in reps):
            repaired.append("Psi")
    if regime.hetero_mu:
        key = "Phi_psi" if regime is Regime.HETERO_BOTH else "Phi_sigma_u"
        reps = [psd_repair(raw[key][a]) for a in range(A)]
        phi = np.stack([r[0] for r in reps])
        if any(r[1] for r in reps):
            repaired.append("Phi")
    return SurComponents(
        procedure=procedure,
        regime=regime,
        Sigma_u=out["Sigma_u"],
        Sigma_mu=out["Sigma_mu"],
        Sigma_nu=out["Sigma_nu"],
        Psi=psi,
        Phi=phi,
        raw=raw,
        repaired=tuple(repaired),
        moments=moments,
    )


def que_sur_components(
    design: SurDesign, Y, proj: WithinProjector, inc: IncidenceSet | None = None, strata=None,
    regime=Regime.HETERO_BOTH, states=None, moments=None,
) -> SurComponents:
    """QUE estimates of all M x M components.

    Every equation pair (m, j), m <= j, gets the single-equation formulas
    with cross moments of the two residual vectors and trace constants
    built from C = A_m X_m'Q X_j A_j.  ``states`` and ``moments`` (from
    :func:`que_sur_moments`) can be passed to reuse earlier work.
    """
    regime = Regime.parse(regime)
    inc = proj.inc if inc is None else inc
    if moments is None:
        if states is None:
            states, _ = sur_within_residuals(design, Y, proj)
        moments = que_sur_moments(states)
    M, A = design.M, inc.strata.A
    raw = {
        "Sigma_u": np.zeros((M, M)),
        "Sigma_mu": np.zeros((M, M)),
        "Sigma_nu": np.zeros((M, M)),
        "Psi": np.full((A, M, M), np.nan),
        "Phi_sigma_u": np.full((A, M, M), np.nan),
        "Phi_psi": np.full((A, M, M), np.nan),
    }
    for m in range(M):
        for j in range(m, M):
            mom = moments[(m, j)]
            pair = f"{design.equation_names[m]},{design.equation_names[j]}"
            est = que_solve(mom, inc, regime, pair)
            for key, src in (("Sigma_u", "sigma_u"), ("Sigma_mu", "sigma_mu"), ("Sigma_nu", "sigma_nu")):
                raw[key][m, j] = raw[key][j, m] = est[src]
            for key, src in (("Psi", "psi"), ("Phi_sigma_u", "phi_sigma_u"), ("Phi_psi", "phi_psi")):
                raw[key][:, m, j] = raw[key][:, j, m] = est[src]
    return _assemble("que", regime, raw, moments, A)


def que_sur_moments(states) -> dict:
    """QUE moments for every equation pair (m, j) with m <= j."""
    stats = [_row_stats(s) for s in states]
    M = len(states)
    return {
        (m, j): que_moments(states[m], states[j], stats[m], stats[j])
        for m in range(M)
        for j in range(m, M)
    }


def wb_moments(F, inc: IncidenceSet) -> dict:
    """Within, between-individual and between-period residual (co)variations."""
    idx, strata = inc.index, inc.strata
    A = strata.A
    F = np.asarray(F, dtype=float)
    fbar = F.mean(axis=0)
    fi = inc.individual_means(F)
    ft = inc.period_means(F)
    g = F - fi[idx.ind] - ft[idx.per]
    W_a = np.zeros((A, F.shape[1], F.shape[1]))
    np.add.at(W_a, strata.of_row, np.einsum("rm,rj->rmj", g, g))
    di = fi - fbar
    BC_a = np.zeros_like(W_a)
    np.add.at(BC_a, strata.of_individual, idx.T_i[:, None, None] * np.einsum("im,ij->imj", di, di))
    dt = ft - fbar
    BT = np.einsum("t,tm,tj->mj", idx.N_t.astype(float), dt, dt)
    inv_nt = np.bincount(strata.of_row, weights=1.0 / idx.N_t[idx.per], minlength=A)
    return {"W_a": W_a, "W": W_a.sum(axis=0), "BC_a": BC_a, "BC": BC_a.sum(axis=0), "BT": BT, "inv_Nt_a": inv_nt}


def wb_expectations(inc: IncidenceSet, Psi, Phi, Sigma_nu, regime=Regime.HETERO_BOTH) -> dict:
    """Expected WB (co)variations under given components.

    ``Psi`` and ``Phi`` are A x M x M stacks.  Pooled values inside the
    correction terms are Psi_bar (weights n_a) and Phi_bar (weights sum of
    T_i^2).  For ``regime="mu"`` the remainder is homoscedastic at
    Psi_bar in E(B^C_a).
    """
    regime = Regime.parse(regime)
    idx, st = inc.index, inc.strata
    n, T = idx.n, idx.T
    lam = inc.lambdas
    n_a, N_a = st.n_a.astype(float), st.N_a.astype(float)
    w_a = n_a / n
    Psi, Phi = np.asarray(Psi, dtype=float), np.asarray(Phi, dtype=float)
    t2_a = lam["mu_a"] * n
    Psi_bar = np.einsum("a,amj->mj", n_a, Psi) / n
    Phi_bar = np.einsum("a,amj->mj", t2_a, Phi) / t2_a.sum()
    inv_nt = np.bincount(st.of_row, weights=1.0 / idx.N_t[idx.per], minlength=st.A)

    def col(v):
        return v[:, None, None]

    W_a = col(n_a - N_a) * Psi - col(inv_nt) * Psi_bar
    BC_a = col(n_a) * Phi - col(w_a * lam["mu"]) * Phi_bar
    if regime is Regime.HETERO_MU:
        BC_a = BC_a + col(N_a - w_a) * Psi_bar
    else:
        BC_a = BC_a + col(N_a) * Psi - col(w_a) * Psi_bar
    BT = (n - lam["nu"]) * np.asarray(Sigma_nu, dtype=float) + (T - 1) * Psi_bar
    return {"W_a": W_a, "BC_a": BC_a, "BT": BT}


def wb_sur_components(
    design: SurDesign, Y, proj: WithinProjector, index=None, strata=None,
    regime=Regime.HETERO_BOTH, F=None, moments=None,
) -> SurComponents:
    """Within-between estimates of all M x M components.

    Uses the centered per-equation Within residuals.  The pooled
    estimates stand in for the average stratum components wherever the
    moment expectations need them.
    """
    regime = Regime.parse(regime)
    inc = proj.inc
    if F is None and moments is None:
        _, F = sur_within_residuals(design, Y, proj)
    idx, st = inc.index, inc.strata
    n, N, T, A = idx.n, idx.N, idx.T, st.A
    lam = inc.lambdas
    mom = wb_moments(F, inc) if moments is None else moments
    if n - N - T <= 0:
        raise DegenerateStratum("n - N - T is not positive")
    S_u = mom["W"] / (n - N - T)
    S_mu = (mom["BC"] - (N - 1) * S_u) / (n - lam["mu"])
    S_nu = (mom["BT"] - (T - 1) * S_u) / (n - lam["nu"])
    n_a, N_a = st.n_a.astype(float), st.N_a.astype(float)
    w_a = n_a / n
    M = mom["W"].shape[0]
    Psi = np.full((A, M, M), np.nan)
    Phi_s = np.full((A, M, M), np.nan)
    Phi_p = np.full((A, M, M), np.nan)
    if regime.hetero_u:
        den = n_a - N_a
        if np.any(den <= 0):
            a = int(np.flatnonzero(den <= 0)[0])
            raise DegenerateStratum("n_a - N_a is not positive", st.labels[a])
        Psi = (mom["W_a"] + mom["inv_Nt_a"][:, None, None] * S_u) / den[:, None, None]
    if regime.hetero_mu:
        base = mom["BC_a"] + (w_a * lam["mu"])[:, None, None] * S_mu
        if regime is Regime.HETERO_MU:
            Phi_s = (base - (N_a - w_a)[:, None, None] * S_u) / n_a[:, None, None]
        else:
            Phi_p = (base - N_a[:, None, None] * Psi + w_a[:, None, None] * S_u) / n_a[:, None, None]
    raw = {
        "Sigma_u": S_u,
        "Sigma_mu": S_mu,
        "Sigma_nu": S_nu,
        "Psi": Psi,
        "Phi_sigma_u": Phi_s,
        "Phi_psi": Phi_p,
    }
    return _assemble("wb", regime, raw, mom, A)


def _pairwise_total(contrib):
    """Sum over the leading axis with numpy's pairwise reduction."""
    flat = contrib.reshape(contrib.shape[0], -1)
    return np.ascontiguousarray(flat.T).sum(axis=1).reshape(contrib.shape[1:])


def sur_gls(design: SurDesign, Y, components: SurComponents, index=None, strata=None, inc=None) -> FitReport:
    """Feasible GLS for the system, accumulated over (stratum, duration) groups.

    Per individual, X_i' Omega_{a,p}^{-1} X_i equals
    sum_t X_it' W1 X_it - p Xbar_i' W1 Xbar_i + p Xbar_i' W2 Xbar_i with
    W1 = (Psi_a + Sigma_nu)^{-1}, W2 = (Psi_a + Sigma_nu + p Phi_a)^{-1}.
    """
    if inc is not None:
        index, strata = inc.index, inc.strata
    if index is None or strata is None:
        raise ValueError("pass index and strata, or inc")
    Y = _as_columns(Y, design.M, design.n)
    A, T = strata.A, index.T
    M = design.M
    W1 = np.empty((A, M, M))
    W2 = np.empty((A, T, M, M))
    for a in range(A):
        for p in range(1, T + 1):
            blk = omega_block(components, a, p, A)
            W1[a] = blk.V1_inv
            W2[a, p - 1] = blk.V2_inv
    Xs = design.stacked()
    Ti = index.T_i
    sums = np.zeros((index.N, M, design.K))
    np.add.at(sums, index.ind, Xs)
    Xbar = sums / Ti[:, None, None]
    ysum = np.zeros((index.N, M))
    np.add.at(ysum, index.ind, Y)
    ybar = ysum / Ti[:, None]

    W1_row = W1[strata.of_row]
    W1_ind = W1[strata.of_individual]
    W2_ind = W2[strata.of_individual, Ti - 1]
    Wd = W2_ind - W1_ind
    p = Ti.astype(float)[:, None, None]

    XtW_rows = np.matmul(Xs.transpose(0, 2, 1), W1_row)
    XtW_ind = p * np.matmul(Xbar.transpose(0, 2, 1), Wd)
    xx_rows = np.matmul(XtW_rows, Xs)
    xx_ind = np.matmul(XtW_ind, Xbar)
    xy_rows = np.matmul(XtW_rows, Y[:, :, None])[:, :, 0]
    xy_ind = np.matmul(XtW_ind, ybar[:, :, None])[:, :, 0]
    XtWX = _pairwise_total(xx_rows) + _pairwise_total(xx_ind)
    XtWy = _pairwise_total(xy_rows) + _pairwise_total(xy_ind)
    cov = _checked_inverse(XtWX, design.coef_names, "X' Omega^-1 X")
    beta = cov @ XtWy
    return FitReport(beta=beta, covariance=cov, names=design.coef_names, components=None)
