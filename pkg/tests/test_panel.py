from __future__ import annotations

import numpy as np
import pytest

from panelec.errors import PanelStructureError
from panelec.panel import PanelIndex, assign_strata, build_incidence, build_panel_index


def test_rows_sorted_individual_major():
    obs = [("b", 2), ("a", 3), ("b", 1), ("a", 1), ("c", 2)]
    idx = build_panel_index(obs)
    assert idx.ids == ("a", "b", "c")
    assert idx.periods == (1, 2, 3)
    np.testing.assert_array_equal(idx.ind, [0, 0, 1, 1, 2])
    np.testing.assert_array_equal(idx.per, [0, 2, 0, 1, 1])
    # canonical row r came from input position source_order[r]
    assert [obs[j] for j in idx.source_order] == [("a", 1), ("a", 3), ("b", 1), ("b", 2), ("c", 2)]


def test_counts_and_duration_groups():
    mask = np.array([[1, 1, 1], [1, 0, 1], [0, 1, 0], [1, 1, 0]], dtype=bool)
    idx = PanelIndex.from_mask(mask)
    np.testing.assert_array_equal(idx.T_i, [3, 2, 1, 2])
    np.testing.assert_array_equal(idx.N_t, [3, 3, 2])
    assert idx.T_i.sum() == idx.N_t.sum() == idx.n == 8
    np.testing.assert_array_equal(idx.N_p, [1, 2, 1])
    np.testing.assert_array_equal(idx.C_p, [1, 3, 4])
    assert (idx.N_p * np.arange(1, 4)).sum() == idx.n
    np.testing.assert_array_equal(idx.duration_group(2), [1, 3])
    np.testing.assert_array_equal(idx.to_mask(), mask)


@pytest.mark.parametrize(
    "obs",
    [
        [],
        [(1, 1), (1, 1)],
    ],
)
def test_bad_panels_rejected(obs):
    with pytest.raises(PanelStructureError):
        build_panel_index(obs)


def test_from_mask_needs_full_coverage():
    with pytest.raises(PanelStructureError):
        PanelIndex.from_mask([[1, 0], [1, 0]])


def test_strata_from_mapping():
    idx = PanelIndex.from_mask(np.ones((4, 2), dtype=bool))
    st = assign_strata(idx, {0: "lo", 1: "hi", 2: "lo", 3: "lo"})
    assert st.labels == ("hi", "lo")
    np.testing.assert_array_equal(st.N_a, [1, 3])
    np.testing.assert_array_equal(st.n_a, [2, 6])
    np.testing.assert_array_equal(st.members(1), [0, 2, 3])
    np.testing.assert_array_equal(st.rows(0), [2, 3])


def test_strata_mapping_missing_individual():
    idx = PanelIndex.from_mask(np.ones((3, 2), dtype=bool))
    with pytest.raises(PanelStructureError):
        assign_strata(idx, {0: 1, 1: 1})


def test_decile_strata_equal_size():
    idx = PanelIndex.from_mask(np.ones((20, 2), dtype=bool))
    vals = np.random.default_rng(0).normal(size=20)
    st = assign_strata(idx, values=vals, count=10)
    np.testing.assert_array_equal(st.N_a, np.full(10, 2))
    # strata are ordered by value
    means = [vals[st.members(a)].mean() for a in range(10)]
    assert np.all(np.diff(means) > 0)


def test_incidence_matrices(toy):
    inc = toy["inc"]
    idx, st = toy["index"], toy["strata"]
    for D in (inc.delta_mu, inc.delta_nu, inc.delta_alpha):
        np.testing.assert_array_equal(D.toarray().sum(axis=1), 1)
    np.testing.assert_array_equal((inc.delta_mu.T @ inc.delta_mu).diagonal(), idx.T_i)
    np.testing.assert_array_equal((inc.delta_nu.T @ inc.delta_nu).diagonal(), idx.N_t)
    np.testing.assert_array_equal((inc.delta_alpha.T @ inc.delta_alpha).diagonal(), st.n_a)
    np.testing.assert_array_equal(inc.delta_TN.toarray(), idx.to_mask().T)
    np.testing.assert_array_equal(inc.delta_AN.toarray().sum(axis=0), 1)
    assert st.N_a.sum() == idx.N and st.n_a.sum() == idx.n
    direct = (inc.delta_alpha.T @ inc.delta_mu).toarray() / idx.T_i[None, :]
    np.testing.assert_allclose(inc.delta_AN.toarray(), direct)


def test_stratum_periods_and_groups(toy):
    st, idx = toy["strata"], toy["index"]
    for a in range(st.A):
        expected = np.flatnonzero(idx.to_mask()[st.members(a)].any(axis=0))
        np.testing.assert_array_equal(st.periods_of(a), expected)
    total = sum(st.group(a, p).size for a in range(st.A) for p in range(1, idx.T + 1))
    assert total == idx.N


def test_lambda_constants(toy):
    inc, idx = toy["inc"], toy["index"]
    lam = inc.lambdas
    n = idx.n
    assert lam["mu"] == pytest.approx((idx.T_i**2).sum() / n)
    assert lam["nu"] == pytest.approx((idx.N_t**2).sum() / n)
    assert lam["mu_a"].sum() == pytest.approx(lam["mu"])
    assert lam["nu_a"].sum() == pytest.approx(lam["nu"])
