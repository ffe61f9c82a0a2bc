"""Single-equation estimators for the stratified two-way error-component model.

    y = X b + D_mu mu + D_nu nu + u,
    var(u_it) = psi2_a, var(mu_i) = phi2_a for individuals in stratum a,
    var(nu_t) = sigma2_nu.

Estimation proceeds in three steps: the Within estimator, quadratic
unbiased estimation (QUE) of the variance components from centered Within
residuals, and feasible GLS with the implied disturbance covariance.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import DegenerateStratum, NotPD, RankDeficient
from .panel import IncidenceSet
from .projections import WithinProjector, center, within_projector

__all__ = [
    "Regime",
    "VarianceComponents",
    "FitReport",
    "Omega",
    "SingleResult",
    "within_fit",
    "fe_robust_by_individual",
    "fe_robust_by_stratum",
    "que_components",
    "build_omega",
    "gls_fit",
    "estimate_single",
    "identity_checks",
    "que_moments",
    "que_expectations",
    "que_solve",
]

RANK_RTOL = 1e-10


class Regime(str, enum.Enum):
    """Which error components are allowed to vary across strata."""

    HOMOSCEDASTIC = "homoscedastic"
    HETERO_U = "hetero_u"
    HETERO_MU = "hetero_mu"
    HETERO_BOTH = "hetero_both"

    @property
    def hetero_u(self) -> bool:
        return self in (Regime.HETERO_U, Regime.HETERO_BOTH)

    @property
    def hetero_mu(self) -> bool:
        return self in (Regime.HETERO_MU, Regime.HETERO_BOTH)

    @classmethod
    def parse(cls, value) -> "Regime":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "homo": cls.HOMOSCEDASTIC,
            "homoscedastic": cls.HOMOSCEDASTIC,
            "u": cls.HETERO_U,
            "hetero_u": cls.HETERO_U,
            "mu": cls.HETERO_MU,
            "hetero_mu": cls.HETERO_MU,
            "both": cls.HETERO_BOTH,
            "hetero_both": cls.HETERO_BOTH,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown regime {value!r}") from None


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    """Estimated variance components.

    Stored values are nonnegative; ``raw`` keeps the unclipped estimates
    and ``clipped`` names the ones that were truncated at zero.
    ``psi2`` and ``phi2`` are per-stratum arrays, or ``None`` when the
    regime keeps that component homoscedastic.
    """

    regime: Regime
    sigma2_u: float
    sigma2_mu: float
    sigma2_nu: float
    psi2: np.ndarray | None = None
    phi2: np.ndarray | None = None
    raw: dict = field(default_factory=dict)
    clipped: tuple = ()
    moments: dict = field(default_factory=dict, repr=False)

    def psi_by_stratum(self, A: int) -> np.ndarray:
        return self.psi2 if self.psi2 is not None else np.full(A, self.sigma2_u)

    def phi_by_stratum(self, A: int) -> np.ndarray:
        return self.phi2 if self.phi2 is not None else np.full(A, self.sigma2_mu)


@dataclass(frozen=True, eq=False)
class FitReport:
    """Coefficients with their covariance matrix."""

    beta: np.ndarray
    covariance: np.ndarray
    names: tuple = ()
    components: VarianceComponents | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    standard_errors = se


def _as_matrix(X) -> np.ndarray:
    # fixed memory layout keeps BLAS results identical across callers
    X = np.asarray(X, dtype=float)
    return np.ascontiguousarray(X[:, None] if X.ndim == 1 else X)


def _names(names, k, prefix="x"):
    if names is None:
        return tuple(f"{prefix}{j + 1}" for j in range(k))
    names = tuple(names)
    if len(names) != k:
        raise ValueError(f"expected {k} names, got {len(names)}")
    return names


def _checked_inverse(S, names, what, equation=None):
    """Inverse of a symmetric positive-definite moment matrix.

    Singularity is judged on the unit-diagonal rescaling; the columns left
    over by a pivoted QR are reported as the offending ones.
    """
    S = 0.5 * (S + S.T)
    d = np.sqrt(np.clip(np.diag(S), 0.0, None))
    dn = np.where(d > 0, d, 1.0)
    R = S / np.outer(dn, dn)
    w = np.linalg.eigvalsh(R) if R.size else np.zeros(0)
    if R.size == 0 or np.any(d == 0) or w[0] <= RANK_RTOL * w[-1]:
        _, r, piv = sla.qr(R, pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > RANK_RTOL * diag[0])) if diag.size and diag[0] > 0 else 0
        bad = [names[j] for j in piv[rank:]] if names else []
        raise RankDeficient(f"{what} is singular (rank {rank} of {S.shape[0]})", bad, equation)
    inv = np.linalg.inv(R) / np.outer(dn, dn)
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True, eq=False)
class WithinState:
    """Within regression plus the quantities the QUE formulas reuse."""

    proj: WithinProjector
    X: np.ndarray
    y: np.ndarray
    names: tuple
    QX: np.ndarray
    A: np.ndarray
    beta: np.ndarray

    @cached_property
    def resid(self) -> np.ndarray:
        """e = y - X b_W (effects not removed)."""
        return self.y - self.X @ self.beta

    @cached_property
    def f(self) -> np.ndarray:
        return center(self.resid)

    @cached_property
    def Qf(self) -> np.ndarray:
        return self.proj.apply(self.f)

    @cached_property
    def q_n(self) -> float:
        return float(self.Qf @ self.Qf)

    @property
    def k1(self) -> int:
        return self.X.shape[1]


def _within_state(X, y, proj: WithinProjector, names=None, equation=None) -> WithinState:
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != proj.n or y.shape != (proj.n,):
        raise ValueError(f"X and y must have {proj.n} rows")
    names = _names(names, X.shape[1])
    QX = proj.apply(X)
    A = _checked_inverse(QX.T @ X, names, "X'Q X", equation)
    beta = A @ (QX.T @ y)
    return WithinState(proj, X, y, names, QX, A, beta)


def within_fit(X, y, proj: WithinProjector, names=None) -> FitReport:
    """Within estimator b_W = (X'QX)^{-1} X'Qy.

    ``X`` must not contain an intercept (it is annihilated by the
    projector).  The classical covariance uses
    sigma2_u = f'Qf / (tr(Q) - (k-1)), where tr(Q) = n - N - (T-1) for a
    connected panel.
    """
    st = _within_state(X, y, proj, names)
    dof = proj.trace - st.k1
    if dof <= 0:
        raise DegenerateStratum("no residual degrees of freedom for the Within fit")
    s2 = st.q_n / dof
    return FitReport(
        beta=st.beta,
        covariance=s2 * st.A,
        names=st.names,
        diagnostics={"dof": dof, "sigma2_u": s2, "q_n": st.q_n},
    )


def _blockwise(proj: WithinProjector, V, codes, ngroups) -> np.ndarray:
    """Apply the diagonal blocks of Q_D defined by row groups ``codes``.

    Every group must consist of whole individuals, so Q_A is already
    block diagonal within it.  Row r of the result is
    (Q_A V)_r - (B Q^-)_r * sum_{s in g(r)} B_s' (Q_A V)_s.
    """
    W = proj.demean_individual(V)
    B = proj.B
    T = B.shape[1]
    outer = np.einsum("rt,rk->rtk", B, W).reshape(B.shape[0], -1)
    S = np.zeros((ngroups, outer.shape[1]))
    np.add.at(S, codes, outer)
    S = S.reshape(ngroups, T, W.shape[1])
    return W - np.einsum("rt,rtk->rk", proj.BQ, S[codes])


def _sandwich(st: WithinState, codes, ngroups) -> np.ndarray:
    Xt = _blockwise(st.proj, st.X, codes, ngroups)
    yt = _blockwise(st.proj, st.y[:, None], codes, ngroups)[:, 0]
    e = yt - Xt @ st.beta
    scores = np.zeros((ngroups, st.k1))
    np.add.at(scores, codes, Xt * e[:, None])
    meat = scores.T @ scores
    cov = st.A @ meat @ st.A
    return 0.5 * (cov + cov.T)


def fe_robust_by_individual(X, y, proj: WithinProjector, index=None, names=None) -> np.ndarray:
    """Heteroscedasticity-robust Within covariance clustered by individual.

    Each individual's block is transformed by its own diagonal block of
    the Within projector, ``E - E D_i Q^- D_i' E``.
    """
    st = _within_state(X, y, proj, names)
    index = proj.inc.index if index is None else index
    return _sandwich(st, index.ind, index.N)


def fe_robust_by_stratum(X, y, proj: WithinProjector, strata=None, names=None) -> np.ndarray:
    """Robust Within covariance with observations stacked by stratum."""
    st = _within_state(X, y, proj, names)
    strata = proj.inc.strata if strata is None else strata
    return _sandwich(st, strata.of_row, strata.A)


# ---------------------------------------------------------------------------
# quadratic unbiased estimation


def _row_stats(st: WithinState) -> dict:
    inc = st.proj.inc
    return {
        "xbar_i": inc.individual_means(st.X),
        "xbar_t": inc.period_means(st.X),
        "fbar_i": inc.individual_means(st.f),
        "fbar_t": inc.period_means(st.f),
        "s": st.X.sum(axis=0),
        "s_a": np.asarray(inc.delta_alpha.T @ st.X),
    }


def que_moments(sm: WithinState, sj: WithinState, stats_m=None, stats_j=None) -> dict:
    """Quadratic forms and trace constants for one pair of equations.

    With ``sm is sj`` this gives the single-equation quantities.  All
    constants use C = A_m X_m'Q X_j A_j, which reduces to A = (X'QX)^{-1}.
    """
    proj = sm.proj
    inc = proj.inc
    idx, strata = inc.index, inc.strata
    A, n = strata.A, idx.n
    stm = stats_m if stats_m is not None else _row_stats(sm)
    stj = stats_j if stats_j is not None else (stm if sj is sm else _row_stats(sj))
    srow, sind = strata.of_row, strata.of_individual

    def by_row(v):
        return np.bincount(srow, weights=v, minlength=A)

    def by_ind(v):
        return np.bincount(sind, weights=v, minlength=A)

    Ti = idx.T_i.astype(float)
    Nt = idx.N_t.astype(float)
    C = sm.A @ (sm.QX.T @ sj.QX) @ sj.A

    q_na = by_row(sm.Qf * sj.Qf)
    q_Na = by_ind(Ti * stm["fbar_i"] * stj["fbar_i"])
    q_T = float(np.sum(Nt * stm["fbar_t"] * stj["fbar_t"]))

    k_a_m = by_row(np.einsum("rk,kl,rl->r", sm.QX, sm.A, sm.QX))
    k_a_j = by_row(np.einsum("rk,kl,rl->r", sj.QX, sj.A, sj.QX))
    k_a_mj = by_row(np.einsum("rk,kl,rl->r", sm.QX, C, sj.QX))
    k_Na = by_ind(Ti * np.einsum("ik,kl,il->i", stm["xbar_i"], C, stj["xbar_i"]))
    k_T = float(np.sum(Nt * np.einsum("tk,kl,tl->t", stm["xbar_t"], C, stj["xbar_t"])))
    k_0 = float(stm["s"] @ C @ stj["s"]) / n
    k_0a = (stm["s_a"] @ C @ stj["s"] + stj["s_a"] @ C.T @ stm["s"]) / n
    trQ_a = by_row(proj.diagonal)
    return {
        "q_na": q_na,
        "q_n": float(q_na.sum()),
        "q_Na": q_Na,
        "q_N": float(q_Na.sum()),
        "q_T": q_T,
        "k_m": sm.k1,
        "k_j": sj.k1,
        "k_a_m": k_a_m,
        "k_a_j": k_a_j,
        "k_a_mj": k_a_mj,
        "k_mj": float(k_a_mj.sum()),
        "k_Na": k_Na,
        "k_N": float(k_Na.sum()),
        "k_T": k_T,
        "k_0": k_0,
        "k_0a": k_0a,
        "trQ": float(trQ_a.sum()),
        "trQ_a": trQ_a,
        "tau_a": strata.n_a - strata.N_a - trQ_a,
    }


def que_solve(mom: dict, inc: IncidenceSet, regime: Regime, pair=None) -> dict:
    """Raw (unclipped) QUE estimates from moments of one equation pair.

    Returns ``sigma_u``, ``sigma_mu``, ``sigma_nu`` and the per-stratum
    ``psi``, ``phi_sigma_u`` (mu-only heteroscedasticity) and ``phi_psi``
    (both components heteroscedastic); entries the regime does not need
    are NaN.  Plug-in values are the raw estimates, so that with a single
    stratum the heteroscedastic formulas reproduce the homoscedastic ones
    exactly.
    """
    idx, strata = inc.index, inc.strata
    n, N, T = idx.n, idx.N, idx.T
    lam = inc.lambdas
    n_a, N_a = strata.n_a.astype(float), strata.N_a.astype(float)
    w_a = n_a / n

    dof_u = mom["trQ"] - mom["k_m"] - mom["k_j"] + mom["k_mj"]
    if dof_u <= 0:
        raise DegenerateStratum("no degrees of freedom for the remainder variance", equation=pair)
    s_u = mom["q_n"] / dof_u

    M = np.array([[n - lam["mu"], N - lam["nu"]], [T - lam["mu"], n - lam["nu"]]])
    rhs = np.array(
        [
            mom["q_N"] - (N + mom["k_N"] - mom["k_0"] - 1.0) * s_u,
            mom["q_T"] - (T + mom["k_T"] - mom["k_0"] - 1.0) * s_u,
        ]
    )
    s_mu, s_nu = np.linalg.solve(M, rhs)

    A = strata.A
    psi = np.full(A, np.nan)
    phi_s = np.full(A, np.nan)
    phi_p = np.full(A, np.nan)
    if regime.hetero_u:
        den = mom["trQ_a"]
        if np.any(den <= 0):
            a = int(np.flatnonzero(den <= 0)[0])
            raise DegenerateStratum("n_a - N_a - tau_a is not positive", strata.labels[a], pair)
        psi = (mom["q_na"] + (mom["k_a_m"] + mom["k_a_j"] - mom["k_a_mj"]) * s_u) / den
    if regime.hetero_mu:
        den = n_a - 2.0 * lam["mu_a"]
        if np.any(den <= 0):
            a = int(np.flatnonzero(den <= 0)[0])
            raise DegenerateStratum("n_a - 2 lambda_mu_a is not positive", strata.labels[a], pair)
        k_part = mom["k_Na"] - mom["k_0a"] + w_a * mom["k_0"]
        common = mom["q_Na"] - w_a * lam["mu"] * s_mu - (N_a - 2.0 * lam["nu_a"] + w_a * lam["nu"]) * s_nu
        if regime is Regime.HETERO_MU:
            phi_s = (common - (N_a + k_part - w_a) * s_u) / den
        else:
            phi_p = (common - (N_a - 2.0 * w_a) * psi - (k_part + w_a) * s_u) / den
    return {
        "sigma_u": s_u,
        "sigma_mu": float(s_mu),
        "sigma_nu": float(s_nu),
        "psi": psi,
        "phi_sigma_u": phi_s,
        "phi_psi": phi_p,
    }


def que_expectations(
    mom: dict, inc: IncidenceSet, psi_a, phi_a, sigma_nu, regime=Regime.HETERO_BOTH,
    psi_bar=None, phi_bar=None,
) -> dict:
    """Expected QUE quadratic forms under given per-stratum components.

    These are the moment equations the estimators invert, so
    ``que_solve`` applied to them returns the inputs.  Stratum values
    enter the leading terms; correction terms use pooled values
    ``psi_bar`` (default: mean of psi_a weighted by tr(H_a Q H_a')) and
    ``phi_bar`` (default: mean of phi_a weighted by sum of T_i^2).  Under
    heteroscedasticity these are the approximations the estimators rest
    on, not exact expectations.  ``regime="mu"`` selects the mu-only form
    of E(q_Na), with the remainder homoscedastic at ``psi_bar``.
    """
    regime = Regime.parse(regime)
    idx, strata = inc.index, inc.strata
    n, N, T = idx.n, idx.N, idx.T
    lam = inc.lambdas
    n_a, N_a = strata.n_a.astype(float), strata.N_a.astype(float)
    w_a = n_a / n
    psi_a = np.broadcast_to(np.asarray(psi_a, dtype=float), (strata.A,))
    phi_a = np.broadcast_to(np.asarray(phi_a, dtype=float), (strata.A,))
    if psi_bar is None:
        psi_bar = float(mom["trQ_a"] @ psi_a / mom["trQ"])
    if phi_bar is None:
        t2_a = lam["mu_a"] * n
        phi_bar = float(t2_a @ phi_a / t2_a.sum())
    k_a = mom["k_a_m"] + mom["k_a_j"] - mom["k_a_mj"]
    q_na = mom["trQ_a"] * psi_a - k_a * psi_bar
    k_part = mom["k_Na"] - mom["k_0a"] + w_a * mom["k_0"]
    rest = (n_a - 2.0 * lam["mu_a"]) * phi_a + w_a * lam["mu"] * phi_bar
    rest = rest + (N_a - 2.0 * lam["nu_a"] + w_a * lam["nu"]) * sigma_nu
    if regime is Regime.HETERO_MU:
        q_Na = (N_a + k_part - w_a) * psi_bar + rest
    else:
        q_Na = (N_a - 2.0 * w_a) * psi_a + (k_part + w_a) * psi_bar + rest
    return {
        "q_na": q_na,
        "q_n": (mom["trQ"] - mom["k_m"] - mom["k_j"] + mom["k_mj"]) * psi_bar,
        "q_Na": q_Na,
        "q_N": (N + mom["k_N"] - mom["k_0"] - 1.0) * psi_bar + (n - lam["mu"]) * phi_bar + (N - lam["nu"]) * sigma_nu,
        "q_T": (T + mom["k_T"] - mom["k_0"] - 1.0) * psi_bar + (T - lam["mu"]) * phi_bar + (n - lam["nu"]) * sigma_nu,
    }


def _clip(value, name, clipped):
    arr = np.asarray(value, dtype=float)
    if np.any(arr < 0):
        clipped.append(name)
    out = np.clip(arr, 0.0, None)
    return float(out) if out.ndim == 0 else out


def que_components(
    X_within,
    X_full,
    y,
    proj: WithinProjector,
    inc: IncidenceSet | None = None,
    strata=None,
    regime=Regime.HETERO_BOTH,
    names=None,
) -> VarianceComponents:
    """QUE variance components from Within residuals.

    Parameters
    ----------
    X_within : array_like, shape (n, k-1)
        Regressors without intercept, used for the Within step.
    X_full : array_like, shape (n, k) or None
        Regressors with intercept.  Only checked for consistency here; it
        is consumed by :func:`gls_fit`.
    y : array_like, shape (n,)
    proj : WithinProjector
    inc, strata : optional
        Default to those the projector was built from.
    regime : Regime or str
    """
    regime = Regime.parse(regime)
    inc = proj.inc if inc is None else inc
    if strata is not None and strata is not inc.strata:
        if not np.array_equal(strata.of_individual, inc.strata.of_individual):
            raise ValueError("strata differ from the projector's incidence set")
    if X_full is not None:
        Xf = _as_matrix(X_full)
        if Xf.shape[1] != _as_matrix(X_within).shape[1] + 1:
            raise ValueError("X_full must have exactly one more column (the intercept) than X_within")
    st = _within_state(X_within, y, proj, names)
    return _components_from_state(st, regime)


def _components_from_state(st: WithinState, regime: Regime, mom=None) -> VarianceComponents:
    inc = st.proj.inc
    mom = que_moments(st, st) if mom is None else mom
    raw = que_solve(mom, inc, regime)
    clipped: list = []
    s_u = _clip(raw["sigma_u"], "sigma2_u", clipped)
    s_mu = _clip(raw["sigma_mu"], "sigma2_mu", clipped)
    s_nu = _clip(raw["sigma_nu"], "sigma2_nu", clipped)
    psi = _clip(raw["psi"], "psi2", clipped) if regime.hetero_u else None
    if regime is Regime.HETERO_MU:
        phi = _clip(raw["phi_sigma_u"], "phi2", clipped)
    elif regime is Regime.HETERO_BOTH:
        phi = _clip(raw["phi_psi"], "phi2", clipped)
    else:
        phi = None
    return VarianceComponents(
        regime=regime,
        sigma2_u=s_u,
        sigma2_mu=s_mu,
        sigma2_nu=s_nu,
        psi2=psi,
        phi2=phi,
        raw=raw,
        clipped=tuple(clipped),
        moments=mom,
    )


# ---------------------------------------------------------------------------
# disturbance covariance and GLS


@dataclass(frozen=True, eq=False)
class Omega:
    """Omega = diag(psi) + D_mu diag(phi) D_mu' + sigma2_nu D_nu D_nu'.

    ``psi_row`` holds the remainder variance of every row (constant within
    an individual), ``phi_ind`` the individual-effect variance of every
    individual.  Solves use the Woodbury identity around the
    block-diagonal individual part by default (one T x T Cholesky); the
    ``"dense"`` method factors the full n x n matrix.
    """

    inc: IncidenceSet
    psi_row: np.ndarray
    phi_ind: np.ndarray
    sigma2_nu: float
    method: str = "woodbury"

    @property
    def n(self) -> int:
        return self.psi_row.shape[0]

    def dense(self) -> np.ndarray:
        ind, per = self.inc.index.ind, self.inc.index.per
        out = np.where(ind[:, None] == ind[None, :], self.phi_ind[ind][:, None], 0.0)
        out = out + self.sigma2_nu * (per[:, None] == per[None, :])
        out[np.diag_indices_from(out)] += self.psi_row
        return out

    def matvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        inc = self.inc
        col = (lambda a: a) if v.ndim == 1 else (lambda a: a[:, None])
        out = col(self.psi_row) * v
        out = out + (col(self.phi_ind) * (inc.delta_mu.T @ v))[inc.index.ind]
        out = out + self.sigma2_nu * (inc.delta_nu.T @ v)[inc.index.per]
        return out

    @cached_property
    def _psi_ind(self) -> np.ndarray:
        return self.psi_row[self.inc.index.starts[:-1]]

    def _solve_D(self, v) -> np.ndarray:
        inc = self.inc
        psi_i = self._psi_ind
        Ti = inc.index.T_i
        c = 1.0 / (psi_i + Ti * self.phi_ind) - 1.0 / psi_i
        means = inc.individual_means(v)
        if v.ndim == 1:
            return v / self.psi_row + (c * means)[inc.index.ind]
        return v / self.psi_row[:, None] + (c[:, None] * means)[inc.index.ind]

    @cached_property
    def _woodbury(self):
        if not np.all(np.isfinite(self.psi_row) & (self.psi_row > 0)):
            raise NotPD("remainder variances must be positive")
        if np.any(self.phi_ind < 0) or self.sigma2_nu < 0:
            raise NotPD("effect variances must be nonnegative")
        if self.sigma2_nu == 0:
            return None
        Z = self._solve_D(self.inc.delta_nu.toarray())
        # I + s2 Dnu' D^-1 Dnu avoids dividing by a tiny s2
        K = np.eye(Z.shape[1]) + self.sigma2_nu * np.asarray(self.inc.delta_nu.T @ Z)
        try:
            fac = sla.cho_factor(0.5 * (K + K.T))
        except np.linalg.LinAlgError:
            raise NotPD("capacitance matrix is not positive definite") from None
        return Z, fac

    @cached_property
    def _dense_factor(self):
        try:
            return sla.cho_factor(self.dense())
        except np.linalg.LinAlgError:
            raise NotPD("Omega is not positive definite") from None

    def solve(self, v) -> np.ndarray:
        """Omega^{-1} v for a vector or n x k matrix."""
        v = np.asarray(v, dtype=float)
        if self.method == "dense":
            return sla.cho_solve(self._dense_factor, v)
        wb = self._woodbury
        out = self._solve_D(v)
        if wb is None:
            return out
        Z, fac = wb
        return out - self.sigma2_nu * (Z @ sla.cho_solve(fac, Z.T @ v))


def _psi_floor(psi, *others):
    """Replace nonpositive remainder variances so Omega stays invertible."""
    psi = np.asarray(psi, dtype=float).copy()
    if np.all(psi > 0):
        return psi
    top = psi.max()
    if top <= 0:
        top = max([float(np.max(o)) for o in others] + [0.0])
    psi[psi <= 0] = 1e-8 * top if top > 0 else 1.0
    return psi


def build_omega(components: VarianceComponents, inc: IncidenceSet, method: str = "woodbury") -> Omega:
    """Disturbance covariance implied by ``components``.

    Strata whose remainder variance was clipped to zero get a floor of
    1e-8 times the largest remainder variance.
    """
    A = inc.strata.A
    psi = _psi_floor(components.psi_by_stratum(A), components.phi_by_stratum(A), components.sigma2_nu)
    phi = components.phi_by_stratum(A)
    return Omega(
        inc=inc,
        psi_row=psi[inc.strata.of_row],
        phi_ind=np.asarray(phi, dtype=float)[inc.strata.of_individual],
        sigma2_nu=float(components.sigma2_nu),
        method=method,
    )


def gls_fit(X_full, y, omega, names=None, components=None) -> FitReport:
    """GLS b = (X'W X)^{-1} X'W y with W = Omega^{-1}.

    ``omega`` may be an :class:`Omega` or a dense SPD array.
    """
    X = _as_matrix(X_full)
    y = np.asarray(y, dtype=float)
    names = _names(names, X.shape[1])
    if isinstance(omega, np.ndarray):
        try:
            fac = sla.cho_factor(omega)
        except np.linalg.LinAlgError:
            raise NotPD("Omega is not positive definite") from None
        WX = sla.cho_solve(fac, X)
    else:
        WX = omega.solve(X)
    cov = _checked_inverse(X.T @ WX, names, "X' Omega^-1 X")
    beta = cov @ (WX.T @ y)
    return FitReport(beta=beta, covariance=cov, names=names, components=components)


def identity_checks(st: WithinState, mom: dict | None = None) -> dict:
    """Partition identities of the QUE quantities.

    Returns ``name -> (lhs, rhs, scale)``; each identity holds when
    ``|lhs - rhs| <= 1e-9 * scale``.  Right-hand sides are computed along
    an independent path (direct quadratic forms, ranks, counts).
    """
    mom = que_moments(st, st) if mom is None else mom
    inc = st.proj.inc
    idx, strata = inc.index, inc.strata
    ff = float(st.f @ st.f)
    f_sum = inc.delta_mu.T @ st.f
    inv_nt = np.bincount(strata.of_row, weights=1.0 / idx.N_t[idx.per], minlength=strata.A)
    return {
        "sum_k_a": (float(mom["k_a_m"].sum()), float(st.k1), max(1.0, st.k1)),
        "sum_tau_a": (float(mom["tau_a"].sum()), float(st.proj.rank), float(idx.T)),
        "sum_q_na": (float(mom["q_na"].sum()), float(st.f @ st.Qf), max(ff, 1.0)),
        "sum_q_Na": (float(mom["q_Na"].sum()), float(f_sum @ (f_sum / idx.T_i)), max(ff, 1.0)),
        "sum_inv_Nt": (float(inv_nt.sum()), float(idx.T), float(idx.T)),
    }


@dataclass(frozen=True, eq=False)
class SingleResult:
    """Everything :func:`estimate_single` produces for one dataset."""

    within: FitReport
    robust_individual: np.ndarray
    robust_stratum: np.ndarray
    components: dict
    gls: dict
    identities: dict = field(default_factory=dict)


def estimate_single(
    X, y, inc: IncidenceSet, regimes=tuple(Regime), names=None, intercept_name="const",
    proj: WithinProjector | None = None,
) -> SingleResult:
    """Within fit, robust covariances, QUE components and feasible GLS.

    ``X`` excludes the intercept; GLS prepends one.  One GLS fit is
    produced per regime in ``regimes``.
    """
    proj = within_projector(inc) if proj is None else proj
    X = _as_matrix(X)
    st = _within_state(X, y, proj, names)
    dof = proj.trace - st.k1
    s2 = st.q_n / dof
    within = FitReport(st.beta, s2 * st.A, st.names, diagnostics={"dof": dof, "sigma2_u": s2})
    rob_i = _sandwich(st, inc.index.ind, inc.index.N)
    rob_s = _sandwich(st, inc.strata.of_row, inc.strata.A)
    Xf = np.column_stack([np.ones(inc.index.n), X])
    full_names = (intercept_name,) + st.names
    mom = que_moments(st, st)
    comps, gls = {}, {}
    for r in regimes:
        r = Regime.parse(r)
        vc = _components_from_state(st, r, mom)
        comps[r] = vc
        gls[r] = gls_fit(Xf, st.y, build_omega(vc, inc), full_names, vc)
    return SingleResult(within, rob_i, rob_s, comps, gls, identity_checks(st, mom))
