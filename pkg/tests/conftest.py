from __future__ import annotations

import numpy as np
import pytest

from panelec.panel import PanelIndex, assign_strata, build_incidence
from panelec.projections import within_projector


def random_mask(rng, N, T):
    """Presence matrix with every individual and period observed."""
    while True:
        mask = rng.random((N, T)) < 0.7
        if mask.any(axis=1).all() and mask.any(axis=0).all():
            return mask


def connected(mask):
    # union-find over individuals and periods
    N, T = mask.shape
    parent = list(range(N + T))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, t in zip(*np.nonzero(mask)):
        parent[find(i)] = find(N + t)
    return len({find(x) for x in range(N + T)}) == 1


def toy_panel(seed, N_max=6, T_max=4, k_max=3, A_max=3, min_dof=1):
    """Random connected toy panel with regressors of full Within rank."""
    rng = np.random.default_rng(seed)
    while True:
        N = int(rng.integers(2, N_max + 1))
        T = int(rng.integers(2, T_max + 1))
        mask = random_mask(rng, N, T)
        if not connected(mask):
            continue
        idx = PanelIndex.from_mask(mask)
        k = int(rng.integers(1, k_max + 1))
        if idx.n - N - T + 1 - k < min_dof:
            continue
        X = rng.normal(size=(idx.n, k))
        y = X @ rng.normal(size=k) + rng.normal(size=N)[idx.ind] + rng.normal(size=T)[idx.per]
        y = y + rng.normal(size=idx.n)
        A = int(rng.integers(1, min(A_max, N) + 1))
        labels = rng.permutation(np.arange(N) % A)
        strata = assign_strata(idx, dict(zip(idx.ids, labels.tolist())))
        inc = build_incidence(idx, strata)
        proj = within_projector(inc)
        D = np.hstack([inc.delta_mu.toarray(), inc.delta_nu.toarray()])
        if np.linalg.matrix_rank(np.hstack([D, X])) - np.linalg.matrix_rank(D) < k:
            continue
        return {"rng": rng, "index": idx, "strata": strata, "inc": inc, "proj": proj, "X": X, "y": y}


def dummy_ols(X, y, inc):
    """Within slopes and covariance from OLS on individual and period dummies."""
    D = np.hstack([X, inc.delta_mu.toarray(), inc.delta_nu.toarray()[:, 1:]])
    coef, *_ = np.linalg.lstsq(D, y, rcond=None)
    resid = y - D @ coef
    dof = D.shape[0] - np.linalg.matrix_rank(D)
    s2 = resid @ resid / dof
    cov = s2 * np.linalg.pinv(D.T @ D)[: X.shape[1], : X.shape[1]]
    return coef[: X.shape[1]], cov, s2, dof


def direct_projector(inc):
    """I - D D^+ with D = [D_mu D_nu]."""
    D = np.hstack([inc.delta_mu.toarray(), inc.delta_nu.toarray()])
    return np.eye(D.shape[0]) - D @ np.linalg.pinv(D)


TOY_SEEDS = list(range(50))


@pytest.fixture(params=TOY_SEEDS[:10])
def toy(request):
    return toy_panel(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
