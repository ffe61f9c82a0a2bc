from __future__ import annotations

import csv
import json
from importlib import resources

import numpy as np
import pytest

from conftest import TOY_SEEDS, direct_projector, dummy_ols, toy_panel
from panelec.errors import DegenerateStratum, NotPD, RankDeficient
from panelec.panel import PanelIndex, assign_strata, build_incidence, build_panel_index
from panelec.projections import within_projector
from panelec.single import (
    Omega,
    Regime,
    VarianceComponents,
    build_omega,
    estimate_single,
    fe_robust_by_individual,
    fe_robust_by_stratum,
    gls_fit,
    identity_checks,
    que_components,
    que_expectations,
    que_moments,
    que_solve,
    within_fit,
)
from panelec.single import _within_state


def medium_panel(seed=7, N=40, T=6, A=4, k=2):
    rng = np.random.default_rng(seed)
    mask = rng.random((N, T)) < 0.75
    mask[:, 0] = True
    idx = PanelIndex.from_mask(mask)
    strata = assign_strata(idx, {i: i % A for i in range(N)})
    inc = build_incidence(idx, strata)
    X = rng.normal(size=(idx.n, k)) + np.arange(idx.n)[:, None] % 3
    scale = 1.0 + np.arange(A)
    y = (
        X @ np.arange(1.0, k + 1)
        + np.sqrt(2 * scale)[strata.of_individual][idx.ind] * rng.normal(size=N)[idx.ind]
        + rng.normal(size=T)[idx.per]
        + np.sqrt(scale)[strata.of_row] * rng.normal(size=idx.n)
    )
    return inc, X, y


@pytest.mark.parametrize("seed", TOY_SEEDS)
def test_within_equals_dummy_ols(seed):
    t = toy_panel(seed)
    fit = within_fit(t["X"], t["y"], t["proj"])
    b, cov, s2, dof = dummy_ols(t["X"], t["y"], t["inc"])
    np.testing.assert_allclose(fit.beta, b, atol=1e-8)
    np.testing.assert_allclose(fit.covariance, cov, atol=1e-8)
    assert fit.diagnostics["dof"] == pytest.approx(dof)


def _toy_data():
    text = resources.files("panelec").joinpath("data/toy.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    idx = build_panel_index([(int(r["id"]), int(r["t"])) for r in rows])
    rows = [rows[j] for j in idx.source_order]
    strata = assign_strata(idx, {int(r["id"]): int(r["stratum"]) for r in rows})
    X = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
    y = np.array([float(r["y"]) for r in rows])
    return build_incidence(idx, strata), X, y


def test_bundled_toy_matches_oracle():
    oracle = json.loads(resources.files("panelec").joinpath("data/toy_oracle.json").read_text())
    inc, X, y = _toy_data()
    fit = within_fit(X, y, within_projector(inc), names=("x1", "x2"))
    np.testing.assert_allclose(fit.beta, [oracle["coefficients"]["x1"], oracle["coefficients"]["x2"]], atol=1e-10)
    np.testing.assert_allclose(fit.se, [oracle["se"]["x1"], oracle["se"]["x2"]], atol=1e-10)
    assert fit.diagnostics["dof"] == pytest.approx(oracle["dof"])
    assert fit.diagnostics["sigma2_u"] == pytest.approx(oracle["sigma2_u"], abs=1e-12)


def test_intercept_in_within_is_rank_deficient(toy):
    X = np.column_stack([np.ones(toy["index"].n), toy["X"]])
    with pytest.raises(RankDeficient) as err:
        within_fit(X, toy["y"], toy["proj"], names=("const",) + tuple(f"x{j}" for j in range(toy["X"].shape[1])))
    assert "const" in err.value.columns
    assert "intercept" in str(err.value)


def _robust_oracle(X, y, inc, codes):
    P = direct_projector(inc)
    QX, Qy = P @ X, P @ y
    Ainv = np.linalg.inv(X.T @ QX)
    beta = Ainv @ (QX.T @ y)
    meat = np.zeros((X.shape[1], X.shape[1]))
    for g in np.unique(codes):
        r = codes == g
        Pg = P[np.ix_(r, r)]
        s = (Pg @ X[r]).T @ (Pg @ y[r] - Pg @ X[r] @ beta)
        meat += np.outer(s, s)
    return Ainv @ meat @ Ainv


def test_robust_covariances_match_dense(toy):
    inc = toy["inc"]
    V_i = fe_robust_by_individual(toy["X"], toy["y"], toy["proj"])
    V_s = fe_robust_by_stratum(toy["X"], toy["y"], toy["proj"])
    np.testing.assert_allclose(V_i, _robust_oracle(toy["X"], toy["y"], inc, inc.index.ind), atol=1e-9)
    np.testing.assert_allclose(V_s, _robust_oracle(toy["X"], toy["y"], inc, inc.strata.of_row), atol=1e-9)


def test_que_moments_direct_forms(toy):
    st = _within_state(toy["X"], toy["y"], toy["proj"])
    mom = que_moments(st, st)
    P = direct_projector(toy["inc"])
    e = toy["y"] - toy["X"] @ st.beta
    f = e - e.mean()
    Pf = P @ f
    strata = toy["strata"]
    for a in range(strata.A):
        r = strata.rows(a)
        assert mom["q_na"][a] == pytest.approx(Pf[r] @ Pf[r], abs=1e-9)
        assert mom["trQ_a"][a] == pytest.approx(np.trace(P[np.ix_(r, r)]), abs=1e-9)
    assert mom["q_n"] == pytest.approx(f @ P @ f, abs=1e-9)


@pytest.mark.parametrize("seed", TOY_SEEDS[:20])
def test_identity_checks_hold(seed):
    t = toy_panel(seed)
    st = _within_state(t["X"], t["y"], t["proj"])
    for name, (lhs, rhs, scale) in identity_checks(st).items():
        assert abs(lhs - rhs) <= 1e-9 * scale, name


@pytest.mark.parametrize("regime", [Regime.HETERO_U, Regime.HETERO_MU, Regime.HETERO_BOTH])
def test_single_stratum_reduces_to_homoscedastic(regime):
    inc, X, y = medium_panel(A=1)
    proj = within_projector(inc)
    hom = que_components(X, None, y, proj, regime=Regime.HOMOSCEDASTIC)
    het = que_components(X, None, y, proj, regime=regime)
    if regime.hetero_u:
        np.testing.assert_allclose(het.raw["psi"], hom.raw["sigma_u"], rtol=1e-8)
    key = "phi_sigma_u" if regime is Regime.HETERO_MU else "phi_psi"
    if regime.hetero_mu:
        np.testing.assert_allclose(het.raw[key], hom.raw["sigma_mu"], rtol=1e-8)


@pytest.mark.parametrize("regime", [Regime.HETERO_MU, Regime.HETERO_BOTH])
def test_que_solve_inverts_expectations(regime):
    inc, X, y = medium_panel()
    st = _within_state(X, y, within_projector(inc))
    mom = que_moments(st, st)
    psi = np.array([1.0, 2.5, 4.0, 7.0])
    phi = np.array([3.0, 1.0, 6.0, 2.0])
    ex = que_expectations(mom, inc, psi, phi, 1.7, regime=regime)
    est = que_solve({**mom, **ex}, inc, regime)
    assert est["sigma_nu"] == pytest.approx(1.7, rel=1e-9)
    if regime is Regime.HETERO_BOTH:
        np.testing.assert_allclose(est["psi"], psi, rtol=1e-9)
        np.testing.assert_allclose(est["phi_psi"], phi, rtol=1e-9)
    else:
        np.testing.assert_allclose(est["phi_sigma_u"], phi, rtol=1e-9)


def test_noise_free_components_vanish():
    inc, X, _ = medium_panel()
    y = 2.0 + X @ np.array([1.0, -1.0])
    vc = que_components(X, None, y, within_projector(inc), regime="both")
    assert vc.sigma2_u == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(vc.psi2, 0.0, atol=1e-12)
    np.testing.assert_allclose(vc.phi2, 0.0, atol=1e-12)


def test_degenerate_stratum_names_stratum():
    # stratum "solo" holds one individual observed once: no within variation
    mask = np.ones((5, 3), dtype=bool)
    mask[4, 1:] = False
    idx = PanelIndex.from_mask(mask)
    strata = assign_strata(idx, {0: "a", 1: "a", 2: "a", 3: "a", 4: "solo"})
    inc = build_incidence(idx, strata)
    X = np.random.default_rng(1).normal(size=(idx.n, 1))
    with pytest.raises(DegenerateStratum, match="solo"):
        que_components(X, None, X[:, 0], within_projector(inc), regime="u")


def _components(inc, rng):
    A = inc.strata.A
    return VarianceComponents(
        Regime.HETERO_BOTH, 1.0, 1.0, 0.8,
        psi2=rng.uniform(0.5, 3, A), phi2=rng.uniform(0, 2, A),
    )


def test_omega_solves_agree(toy):
    vc = _components(toy["inc"], toy["rng"])
    om = build_omega(vc, toy["inc"])
    dense = om.dense()
    v = toy["rng"].normal(size=(om.n, 2))
    np.testing.assert_allclose(om.matvec(v), dense @ v, atol=1e-12)
    ref = np.linalg.solve(dense, v)
    np.testing.assert_allclose(om.solve(v), ref, rtol=1e-8, atol=1e-10)
    om_d = build_omega(vc, toy["inc"], method="dense")
    np.testing.assert_allclose(om_d.solve(v[:, 0]), ref[:, 0], rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("s_nu", [0.0, 5e-324, 1e-200, 1e3])
def test_omega_solve_extreme_period_variance(toy, s_nu):
    A = toy["inc"].strata.A
    vc = VarianceComponents(Regime.HETERO_BOTH, 1.0, 1.0, s_nu, psi2=np.full(A, 2.0), phi2=np.full(A, 0.5))
    om = build_omega(vc, toy["inc"])
    v = toy["rng"].normal(size=om.n)
    np.testing.assert_allclose(om.matvec(om.solve(v)), v, atol=1e-8)


def test_omega_structure(toy):
    inc = toy["inc"]
    vc = _components(inc, toy["rng"])
    dense = build_omega(vc, inc).dense()
    Dm, Dn = inc.delta_mu.toarray(), inc.delta_nu.toarray()
    psi = vc.psi2[inc.strata.of_row]
    phi = vc.phi2[inc.strata.of_individual]
    expected = np.diag(psi) + Dm @ np.diag(phi) @ Dm.T + 0.8 * Dn @ Dn.T
    np.testing.assert_allclose(dense, expected)


def test_omega_rejects_bad_components(toy):
    inc = toy["inc"]
    n = inc.index.n
    om = Omega(inc, np.full(n, 1.0), np.full(inc.index.N, -1.0), 0.5)
    with pytest.raises(NotPD):
        om.solve(np.ones(n))


def test_gls_dense_and_operator_agree(toy):
    inc = toy["inc"]
    vc = _components(inc, toy["rng"])
    om = build_omega(vc, inc)
    Xf = np.column_stack([np.ones(inc.index.n), toy["X"]])
    a = gls_fit(Xf, toy["y"], om)
    b = gls_fit(Xf, toy["y"], om.dense())
    np.testing.assert_allclose(a.beta, b.beta, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(a.covariance, b.covariance, rtol=1e-8, atol=1e-12)


def test_gls_identity_omega_is_ols(toy):
    inc = toy["inc"]
    Xf = np.column_stack([np.ones(inc.index.n), toy["X"]])
    fit = gls_fit(Xf, toy["y"], np.eye(inc.index.n))
    b, *_ = np.linalg.lstsq(Xf, toy["y"], rcond=None)
    np.testing.assert_allclose(fit.beta, b, atol=1e-10)


def test_estimate_single_bundle():
    inc, X, y = medium_panel()
    res = estimate_single(X, y, inc)
    assert set(res.gls) == set(Regime)
    assert res.gls[Regime.HOMOSCEDASTIC].names == ("const", "x1", "x2")
    assert res.components[Regime.HOMOSCEDASTIC].psi2 is None
    assert res.components[Regime.HETERO_BOTH].psi2.shape == (4,)
    for name, (lhs, rhs, scale) in res.identities.items():
        assert abs(lhs - rhs) <= 1e-9 * scale, name
    for r, fit in res.gls.items():
        np.testing.assert_allclose(fit.beta[1:], [1.0, 2.0], atol=0.5)


def test_clipping_is_recorded():
    inc, X, y = medium_panel(seed=3)
    # strip the individual effect so sigma2_mu estimates hover around zero
    rng = np.random.default_rng(0)
    hits = 0
    for s in range(20):
        y = X @ np.array([1.0, 2.0]) + rng.normal(size=inc.index.n)
        vc = que_components(X, None, y, within_projector(inc), regime="both")
        if vc.clipped:
            hits += 1
            for name in vc.clipped:
                value = {"sigma2_u": vc.sigma2_u, "sigma2_mu": vc.sigma2_mu, "sigma2_nu": vc.sigma2_nu}.get(name)
                if value is not None:
                    assert value == 0.0
            assert np.all(vc.phi2 >= 0) and np.all(vc.psi2 >= 0)
    assert hits > 0


@pytest.mark.parametrize("text,expected", [("both", Regime.HETERO_BOTH), ("Hetero-U", Regime.HETERO_U), ("homo", Regime.HOMOSCEDASTIC)])
def test_regime_parse(text, expected):
    assert Regime.parse(text) is expected


def test_regime_parse_rejects():
    with pytest.raises(ValueError):
        Regime.parse("sideways")
