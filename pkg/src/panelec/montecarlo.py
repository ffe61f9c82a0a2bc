"""Monte Carlo experiments on rotating unbalanced panels.

Each run draws a rotating panel, Nerlove-type regressors, decile strata of
the second regressor, and Gaussian error components whose stratum
variances scale with (1 + lambda * xbar2_a)^2.  The run is then estimated
with every procedure and summarised across runs.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PanelError
from .panel import PanelIndex, assign_strata, build_incidence
from .projections import within_projector
from .single import (
    Regime,
    VarianceComponents,
    build_omega,
    estimate_single,
    gls_fit,
)
from .sur import (
    SurComponents,
    SurDesign,
    que_sur_components,
    psd_repair,
    que_sur_moments,
    sur_gls,
    sur_within_residuals,
    wb_moments,
    wb_sur_components,
)

__all__ = [
    "DgpConfig",
    "SimData",
    "RunSummary",
    "duration_profile",
    "gen_rotating_panel",
    "gen_regressors",
    "gen_errors",
    "simulate_run",
    "estimate_run",
    "run_experiment",
    "run_rng",
    "tables",
    "TABLE_HEADERS",
]

REGIMES = tuple(Regime)
PROCEDURES = ("que", "wb")

SIGMA_NU_SUR = ((6.429, 0.717, -1.107), (0.717, 6.271, 1.235), (-1.107, 1.235, 9.371))
SIGMA_MU_SUR = ((9.377, -1.048, 1.276), (-1.048, 6.488, 0.710), (1.276, 0.710, 6.207))
SIGMA_U_SUR = ((6.544, 0.738, 0.881), (0.738, 6.039, -1.232), (0.881, -1.232, 9.489))


@dataclass(frozen=True)
class DgpConfig:
    """Design of one Monte Carlo experiment.

    Single-equation runs regress y on (1, x1, x2, x3).  SUR runs use the
    three-equation system y1 ~ x1 + x2, y2 ~ x1 + x2 + x3, y3 ~ x2 + x3,
    optionally with the coefficient on x2 in y1 tied to x1 in y2 and x3
    in y2 tied to x2 in y3.

    ``regressor_clock="own"`` runs the regressor recursion over each
    individual's own observations (t = 1..T_i); ``"calendar"`` runs it
    over calendar periods and keeps the observed ones.
    ``omega_scale`` multiplies the uniform regressor shocks (0 gives the
    deterministic path).
    """

    model: str = "single"
    N: int = 250
    T: int = 12
    rotation: float = 0.2
    lam: float = 0.0
    runs: int = 200
    seed: int = 20140101
    strata: int = 10
    beta: tuple = (10.0, -3.0, 8.0, -2.0)
    sigma2_mu: float = 6.488
    sigma2_nu: float = 6.271
    sigma2_u: float = 6.039
    betas_sur: tuple = ((15.0, 6.0, -3.0), (10.0, -3.0, 8.0, -2.0), (20.0, -2.0, 5.0))
    Sigma_mu: tuple = SIGMA_MU_SUR
    Sigma_nu: tuple = SIGMA_NU_SUR
    Sigma_u: tuple = SIGMA_U_SUR
    restricted: bool = True
    regressor_clock: str = "own"
    omega_scale: float = 1.0
    report_stratum: int = 5

    def __post_init__(self):
        if self.model not in ("single", "sur"):
            raise ValueError("model must be 'single' or 'sur'")
        if self.N < 2 or self.T < 2:
            raise ValueError("N and T must be at least 2")
        if self.runs < 1:
            raise ValueError("runs must be positive")
        if not 0.0 <= self.rotation < 1.0:
            raise ValueError("rotation must lie in [0, 1)")
        if self.rotation > 0 and self.rotation * self.N < 1:
            raise ValueError("rotation * N must be at least 1")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 1 <= self.strata <= self.N:
            raise ValueError("strata must lie in 1..N")
        if not 1 <= self.report_stratum <= self.strata:
            raise ValueError("report_stratum must lie in 1..strata")
        if self.regressor_clock not in ("own", "calendar"):
            raise ValueError("regressor_clock must be 'own' or 'calendar'")
        for name in ("Sigma_mu", "Sigma_nu", "Sigma_u"):
            S = np.asarray(getattr(self, name), dtype=float)
            if S.shape != (3, 3) or not np.allclose(S, S.T):
                raise ValueError(f"{name} must be a symmetric 3 x 3 matrix")
            if np.linalg.eigvalsh(S)[0] < 0:
                raise ValueError(f"{name} is not positive semidefinite")
        if min(self.sigma2_mu, self.sigma2_nu, self.sigma2_u) < 0:
            raise ValueError("variances must be nonnegative")

    def replace(self, **kw) -> "DgpConfig":
        return dataclasses.replace(self, **kw)


def run_rng(seed: int, run_id: int) -> np.random.Generator:
    """Counter-based generator for one run, independent of execution order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(run_id,))))


def duration_profile(N: int, T: int, rate: float) -> np.ndarray:
    """Number of individuals observed exactly p = 1..T times.

    Each period a share ``rate`` of the panel leaves, so counts decay
    geometrically: N_{p+1} = round((1 - rate) N_p), with N_1 fixed so the
    total is N.  Rounding leftovers are spread one at a time starting
    from the longest duration.
    """
    if rate == 0:
        out = np.zeros(T, dtype=int)
        out[-1] = N
        return out
    keep = 1.0 - rate
    prof = [int(round(N * rate / (1.0 - keep**T)))]
    for _ in range(T - 1):
        prof.append(int(round(keep * prof[-1])))
    prof = np.array(prof)
    gap = N - prof.sum()
    p = T - 1
    while gap != 0:
        step = 1 if gap > 0 else -1
        if prof[p] + step >= 0:
            prof[p] += step
            gap -= step
        p = (p - 1) % T
    return prof


def gen_rotating_panel(config: DgpConfig, rng) -> PanelIndex:
    """Draw which periods each individual is observed in.

    Durations follow :func:`duration_profile` and are shuffled across
    individuals.  Longest durations are placed first, each individual
    taking the currently least-populated periods (random tie-breaks), so
    every period holds about n / T individuals and individuals may leave
    and re-enter.
    """
    N, T = config.N, config.T
    durations = np.repeat(np.arange(1, T + 1), duration_profile(N, T, config.rotation))
    rng.shuffle(durations)
    mask = np.zeros((N, T), dtype=bool)
    counts = np.zeros(T)
    jitter = rng.uniform(0.0, 0.5, size=(N, T))
    for i in np.argsort(-durations, kind="stable"):
        chosen = np.argsort(counts + jitter[i], kind="stable")[: durations[i]]
        mask[i, chosen] = True
        counts[chosen] += 1
    return PanelIndex.from_mask(mask)


def gen_regressors(config: DgpConfig, rng, index: PanelIndex, k: int = 3) -> np.ndarray:
    """n x k regressors x_t = 0.1 t + 0.5 x_{t-1} + w_t, x_0 = 5 + 10 w_0.

    ``w ~ U[-1/2, 1/2]`` scaled by ``config.omega_scale``.  Rows follow
    ``index``.
    """
    N, T = index.N, index.T
    w = config.omega_scale * rng.uniform(-0.5, 0.5, size=(k, N, T + 1))
    path = np.empty((k, N, T + 1))
    path[:, :, 0] = 5.0 + 10.0 * w[:, :, 0]
    for t in range(1, T + 1):
        path[:, :, t] = 0.1 * t + 0.5 * path[:, :, t - 1] + w[:, :, t]
    if config.regressor_clock == "calendar":
        return path[:, index.ind, index.per + 1].T
    own = np.arange(index.n) - index.starts[index.ind] + 1
    return path[:, index.ind, own].T


def _stratum_means(x2, strata):
    return np.bincount(strata.of_row, weights=x2, minlength=strata.A) / strata.n_a


def gen_errors(config: DgpConfig, strata, index: PanelIndex, rng, scale):
    """Draw (mu_i, nu_t, u_it).

    ``scale[a]`` multiplies the stratum-a variances of mu and u.  Returns
    1-d arrays for single-equation designs and (., 3) arrays for SUR.
    """
    s_ind = np.sqrt(scale)[strata.of_individual]
    s_row = np.sqrt(scale)[strata.of_row]
    if config.model == "single":
        mu = np.sqrt(config.sigma2_mu) * s_ind * rng.standard_normal(index.N)
        nu = np.sqrt(config.sigma2_nu) * rng.standard_normal(index.T)
        u = np.sqrt(config.sigma2_u) * s_row * rng.standard_normal(index.n)
        return mu, nu, u

    def factor(S):
        S = np.asarray(S, dtype=float)
        w, V = np.linalg.eigh(S)
        return V * np.sqrt(np.clip(w, 0.0, None))

    mu = s_ind[:, None] * (rng.standard_normal((index.N, 3)) @ factor(config.Sigma_mu).T)
    nu = rng.standard_normal((index.T, 3)) @ factor(config.Sigma_nu).T
    u = s_row[:, None] * (rng.standard_normal((index.n, 3)) @ factor(config.Sigma_u).T)
    return mu, nu, u


def sur_design(X, restricted: bool) -> SurDesign:
    regs = (("x1", "x2"), ("x1", "x2", "x3"), ("x2", "x3"))
    cols = {"x1": 0, "x2": 1, "x3": 2}
    Xs = [X[:, [cols[v] for v in r]] for r in regs]
    restrictions = None
    if restricted:
        restrictions = {"b12": [("y1", "x2"), ("y2", "x1")], "b23": [("y2", "x3"), ("y3", "x2")]}
    return SurDesign.build(Xs, regs, ("y1", "y2", "y3"), restrictions)


@dataclass(frozen=True, eq=False)
class SimData:
    """One simulated dataset with its true components."""

    index: PanelIndex
    strata: object
    X: np.ndarray
    y: np.ndarray
    xbar2: np.ndarray
    scale: np.ndarray


def simulate_run(config: DgpConfig, run_id: int) -> SimData:
    rng = run_rng(config.seed, run_id)
    index = gen_rotating_panel(config, rng)
    X = gen_regressors(config, rng, index)
    ind_mean_x2 = np.bincount(index.ind, weights=X[:, 1], minlength=index.N) / index.T_i
    strata = assign_strata(index, values=ind_mean_x2, count=config.strata)
    xbar2 = _stratum_means(X[:, 1], strata)
    scale = (1.0 + config.lam * xbar2) ** 2
    mu, nu, u = gen_errors(config, strata, index, rng, scale)
    eps = mu[index.ind] + nu[index.per] + u
    if config.model == "single":
        y = config.beta[0] + X @ np.asarray(config.beta[1:]) + eps
    else:
        b1, b2, b3 = (np.asarray(b) for b in config.betas_sur)
        y = np.column_stack(
            [
                b1[0] + X[:, :2] @ b1[1:],
                b2[0] + X @ b2[1:],
                b3[0] + X[:, 1:] @ b3[1:],
            ]
        ) + eps
    return SimData(index, strata, X, y, xbar2, scale)


def true_beta_sur(config: DgpConfig, design: SurDesign) -> np.ndarray:
    beta = np.zeros(design.K)
    for m, (b, cols) in enumerate(zip(config.betas_sur, design.columns)):
        beta[cols] = b
    return beta


def _weighted(v, strata):
    return float(np.asarray(v) @ strata.n_a) / strata.index.n


def _diag_clip(S):
    S = np.array(S, dtype=float)
    d = np.einsum("...ii->...i", S)
    d[...] = np.clip(d, 0.0, None)
    return S


def estimate_run(config: DgpConfig, data: SimData) -> dict:
    """Estimate one dataset with every procedure; returns flat arrays."""
    inc = build_incidence(data.index, data.strata)
    if config.model == "single":
        return _estimate_single(config, data, inc)
    return _estimate_sur(config, data, inc)


def _estimate_single(config, data, inc):
    strata = inc.strata
    n = inc.index.n
    Xf = np.column_stack([np.ones(n), data.X])
    res = estimate_single(data.X, data.y, inc, REGIMES)
    truth = VarianceComponents(
        Regime.HETERO_BOTH,
        config.sigma2_u,
        config.sigma2_mu,
        config.sigma2_nu,
        psi2=config.sigma2_u * data.scale,
        phi2=config.sigma2_mu * data.scale,
    )
    true_fit = gls_fit(Xf, data.y, build_omega(truth, inc))
    rec = {
        "n": np.array(n, dtype=float),
        "n_a": strata.n_a.astype(float),
        "xbar2_a": data.xbar2,
        "psi_true_a": truth.psi2,
        "phi_true_a": truth.phi2,
        "psi_true_bar": _weighted(truth.psi2, strata),
        "phi_true_bar": _weighted(truth.phi2, strata),
        "fe_beta": res.within.beta,
        "fe_se": res.within.se,
        "fe_robust_se": np.sqrt(np.diag(res.robust_individual)),
        "fe_robust_stratum_se": np.sqrt(np.diag(res.robust_stratum)),
        "fe_sigma2_u": res.within.diagnostics["sigma2_u"],
        "true_beta": true_fit.beta,
        "true_se": true_fit.se,
        "true_mse": np.mean((data.y - Xf @ true_fit.beta) ** 2),
        "true_coef_mse": np.sum((true_fit.beta - np.asarray(config.beta)) ** 2),
    }
    for r in REGIMES:
        fit, vc = res.gls[r], res.components[r]
        key = r.value
        rec[f"{key}_beta"] = fit.beta
        rec[f"{key}_se"] = fit.se
        rec[f"{key}_mse"] = np.mean((data.y - Xf @ fit.beta) ** 2)
        rec[f"{key}_coef_mse"] = np.sum((fit.beta - np.asarray(config.beta)) ** 2)
        A = strata.A
        rec[f"{key}_psi_bar"] = _weighted(vc.psi_by_stratum(A), strata)
        rec[f"{key}_phi_bar"] = _weighted(vc.phi_by_stratum(A), strata)
        rec[f"{key}_sigma2_nu"] = vc.sigma2_nu
        rec[f"{key}_clipped"] = float(bool(vc.clipped))
    hom = res.components[Regime.HOMOSCEDASTIC]
    rec["sigma2_u"] = hom.sigma2_u
    rec["sigma2_mu"] = hom.sigma2_mu
    rec["sigma2_nu"] = hom.sigma2_nu
    rec["psi_a"] = res.components[Regime.HETERO_BOTH].psi2
    rec["phi_sigma_u_a"] = res.components[Regime.HETERO_MU].phi2
    rec["phi_psi_a"] = res.components[Regime.HETERO_BOTH].phi2
    return {k: np.asarray(v, dtype=float) for k, v in rec.items()}


def _true_sur_components(config, scale):
    # the repair leaves PD truths untouched and keeps degenerate designs
    # (all variances zero) solvable, as the single-equation floor does
    Su = np.asarray(config.Sigma_u, dtype=float)
    Smu = np.asarray(config.Sigma_mu, dtype=float)
    Snu = np.asarray(config.Sigma_nu, dtype=float)
    Psi = np.stack([psd_repair(s * Su)[0] for s in scale])
    Phi = scale[:, None, None] * Smu
    return SurComponents(
        procedure="true",
        regime=Regime.HETERO_BOTH,
        Sigma_u=Su,
        Sigma_mu=Smu,
        Sigma_nu=Snu,
        Psi=Psi,
        Phi=Phi,
    )


def _fitted_sur(design, beta):
    fitted = np.zeros((design.n, design.M))
    for m, (x, cols) in enumerate(zip(design.X, design.columns)):
        fitted[:, m] = beta[cols[0]] + x @ beta[cols[1:]]
    return fitted


def _estimate_sur(config, data, inc):
    design = sur_design(data.X, config.restricted)
    proj = within_projector(inc)
    states, F = sur_within_residuals(design, data.y, proj)
    qmom = que_sur_moments(states)
    wmom = wb_moments(F, inc)
    beta0 = true_beta_sur(config, design)
    a5 = config.report_stratum - 1
    truth = _true_sur_components(config, data.scale)
    true_fit = sur_gls(design, data.y, truth, inc=inc)
    rec = {
        "n": np.array(inc.index.n, dtype=float),
        "n_a": inc.strata.n_a.astype(float),
        "xbar2_a": data.xbar2,
        "true_beta": true_fit.beta,
        "true_se": true_fit.se,
        "true_mse": np.mean((data.y - _fitted_sur(design, true_fit.beta)) ** 2, axis=0),
        "true_coef_mse": np.sum((true_fit.beta - beta0) ** 2),
        "psi5_true": data.scale[a5] * np.asarray(config.Sigma_u, dtype=float),
        "phi5_true": truth.Phi[a5],
    }
    for proc in PROCEDURES:
        for r in REGIMES:
            if proc == "que":
                comp = que_sur_components(design, data.y, proj, regime=r, moments=qmom)
            else:
                comp = wb_sur_components(design, data.y, proj, regime=r, moments=wmom)
            fit = sur_gls(design, data.y, comp, inc=inc)
            key = f"{proc}_{r.value}"
            rec[f"{key}_beta"] = fit.beta
            rec[f"{key}_se"] = fit.se
            rec[f"{key}_mse"] = np.mean((data.y - _fitted_sur(design, fit.beta)) ** 2, axis=0)
            rec[f"{key}_coef_mse"] = np.sum((fit.beta - beta0) ** 2)
            rec[f"{key}_repaired"] = float(bool(comp.repaired))
            if r is Regime.HETERO_BOTH:
                rec[f"{proc}_psi5"] = _diag_clip(comp.raw["Psi"][a5])
                rec[f"{proc}_phi5_psi"] = _diag_clip(comp.raw["Phi_psi"][a5])
            elif r is Regime.HETERO_MU:
                rec[f"{proc}_phi5_sigma_u"] = _diag_clip(comp.raw["Phi_sigma_u"][a5])
    return {k: np.asarray(v, dtype=float) for k, v in rec.items()}


def _one_run(args):
    config, run_id = args
    try:
        return run_id, estimate_run(config, simulate_run(config, run_id)), None
    except PanelError as exc:
        return run_id, None, f"{type(exc).__name__}: {exc}"


@dataclass(frozen=True, eq=False)
class RunSummary:
    """Per-run records stacked along the first axis, plus failures."""

    config: DgpConfig
    records: dict
    failures: tuple = ()
    coef_names: tuple = field(default=())

    @property
    def runs(self) -> int:
        return next(iter(self.records.values())).shape[0] if self.records else 0

    def mean(self, key):
        return self.records[key].mean(axis=0)

    def mc_se(self, key):
        v = self.records[key]
        return v.std(axis=0, ddof=1) / np.sqrt(v.shape[0]) if v.shape[0] > 1 else np.zeros(v.shape[1:])

    def relative_efficiency(self, key, metric="mse"):
        """Mean MSE of ``key`` over mean MSE of the true-Omega GLS."""
        num = self.mean(f"{key}_{metric}")
        den = self.mean(f"true_{metric}")
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.inf, 1.0))


def run_experiment(config: DgpConfig, threads: int | None = None) -> RunSummary:
    """Run ``config.runs`` replications; deterministic for a given seed.

    Runs that raise an estimation error are excluded and listed in
    ``failures``.
    """
    if threads is None:
        threads = int(os.environ.get("PANELEC_THREADS", "1") or 1)
    jobs = [(config, r) for r in range(config.runs)]
    if threads > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one_run, jobs, chunksize=max(1, config.runs // (4 * threads))))
    else:
        results = [_one_run(j) for j in jobs]
    results.sort(key=lambda t: t[0])
    good = [rec for _, rec, err in results if err is None]
    failures = tuple((rid, err) for rid, _, err in results if err is not None)
    records = {k: np.stack([g[k] for g in good]) for k in good[0]} if good else {}
    if config.model == "single":
        names = ("const", "x1", "x2", "x3")
    else:
        names = sur_design(np.zeros((1, 3)), config.restricted).coef_names
    return RunSummary(config, records, failures, names)


TABLE_HEADERS = {
    "table1": ("lambda", "N", "stratum", "quantity", "value", "mc_se"),
    "table2": ("lambda", "N", "coefficient", "estimator", "mean_estimate", "se", "mc_sd"),
    "table3": ("lambda", "N", "estimator", "relative_efficiency", "coef_relative_efficiency"),
    "table4_que": ("lambda", "N", "coefficient", "estimator", "mean_estimate", "se", "mc_sd"),
    "table4_wb": ("lambda", "N", "coefficient", "estimator", "mean_estimate", "se", "mc_sd"),
    "table5": ("lambda", "N", "procedure", "estimator", "equation", "relative_efficiency"),
    "table6": ("lambda", "N", "stratum", "matrix", "m", "j", "true", "que", "wb"),
}


def _table1(s: RunSummary):
    c = s.config
    rows = []
    series = {
        "n_a": "n_a",
        "xbar2_a": "xbar2_a",
        "psi2_true": "psi_true_a",
        "psi2_hat": "psi_a",
        "phi2_true": "phi_true_a",
        "phi2_hat_sigma_u": "phi_sigma_u_a",
        "phi2_hat_psi": "phi_psi_a",
    }
    for a in range(c.strata):
        for q, key in series.items():
            rows.append((c.lam, c.N, a + 1, q, s.mean(key)[a], s.mc_se(key)[a]))
    pooled = {
        "sigma2_u_hat": "sigma2_u",
        "sigma2_mu_hat": "sigma2_mu",
        "sigma2_nu_hat": "sigma2_nu",
        "fe_sigma2_u_hat": "fe_sigma2_u",
        "psi2_true_bar": "psi_true_bar",
        "phi2_true_bar": "phi_true_bar",
    }
    for r in REGIMES:
        pooled[f"psi2_bar_{r.value}"] = f"{r.value}_psi_bar"
        pooled[f"phi2_bar_{r.value}"] = f"{r.value}_phi_bar"
    for q, key in pooled.items():
        rows.append((c.lam, c.N, "all", q, float(s.mean(key)), float(s.mc_se(key))))
    return rows


def _coef_rows(s: RunSummary, estimators, prefix=""):
    c = s.config
    rows = []
    for est in estimators:
        key = "true" if est == "true" else f"{prefix}{est}"
        beta, se = s.records[f"{key}_beta"], s.records[f"{key}_se"]
        for k, name in enumerate(s.coef_names):
            b = beta[:, k]
            sd = b.std(ddof=1) if b.size > 1 else 0.0
            rows.append((c.lam, c.N, name, est, b.mean(), se[:, k].mean(), sd))
    return rows


def _table2(s: RunSummary):
    rows = _coef_rows(s, ("true",) + tuple(r.value for r in REGIMES))
    c = s.config
    beta = s.records["fe_beta"]
    for est in ("fe", "fe_robust", "fe_robust_stratum"):
        se = s.records[f"{est}_se"]
        for k, name in enumerate(s.coef_names[1:]):
            sd = beta[:, k].std(ddof=1) if s.runs > 1 else 0.0
            rows.append((c.lam, c.N, name, est, beta[:, k].mean(), se[:, k].mean(), sd))
    return rows


def _table3(s: RunSummary):
    c = s.config
    rows = [(c.lam, c.N, "true", 1.0, 1.0)]
    for r in REGIMES:
        rows.append(
            (c.lam, c.N, r.value, float(s.relative_efficiency(r.value)),
             float(s.relative_efficiency(r.value, "coef_mse")))
        )
    return rows


def _table5(s: RunSummary):
    c = s.config
    rows = []
    for m in range(3):
        rows.append((c.lam, c.N, "true", "true", f"y{m + 1}", 1.0))
    for proc in PROCEDURES:
        for r in REGIMES:
            eff = s.relative_efficiency(f"{proc}_{r.value}")
            for m in range(eff.shape[0]):
                rows.append((c.lam, c.N, proc, r.value, f"y{m + 1}", float(eff[m])))
    return rows


def _table6(s: RunSummary):
    c = s.config
    rows = []
    mats = (
        ("psi", "psi5_true", "psi5"),
        ("phi_sigma_u", "phi5_true", "phi5_sigma_u"),
        ("phi_psi", "phi5_true", "phi5_psi"),
    )
    for name, tkey, ekey in mats:
        tv, q, w = s.mean(tkey), s.mean(f"que_{ekey}"), s.mean(f"wb_{ekey}")
        for m in range(3):
            for j in range(m, 3):
                rows.append((c.lam, c.N, c.report_stratum, name, m + 1, j + 1, tv[m, j], q[m, j], w[m, j]))
    return rows


def tables(summaries) -> dict:
    """Long-format result tables for a grid of experiments.

    Single-equation summaries fill tables 1-3, SUR summaries tables 4-6.
    Returns ``name -> list of row tuples`` ordered as ``TABLE_HEADERS``.
    """
    out = {}
    for s in summaries:
        if not s.records:
            continue
        if s.config.model == "single":
            parts = {"table1": _table1(s), "table2": _table2(s), "table3": _table3(s)}
        else:
            parts = {
                "table4_que": _coef_rows(s, ("true",) + tuple(r.value for r in REGIMES), "que_"),
                "table4_wb": _coef_rows(s, ("true",) + tuple(r.value for r in REGIMES), "wb_"),
                "table5": _table5(s),
                "table6": _table6(s),
            }
        for k, rows in parts.items():
            out.setdefault(k, []).extend(rows)
    return out
