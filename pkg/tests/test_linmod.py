import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calmcate.data import CovariateLayout, make_folds
from calmcate.linmod import (
    LassoConvergenceError,
    _select_penalty,
    build_rct_encoder_linear,
    fit_lasso,
    fit_lasso_at,
    fit_ols,
    fit_pca,
    fit_ridge_multi,
    identity_projection,
    kkt_residuals,
    penalty_grid_for,
)


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def ista_lasso(X, y, lam, tol=1e-10, max_iter=2_000_000):
    """Independent proximal-gradient oracle for the same LASSO objective:
    (1/2n)||yc - Xs w||^2 + lam*||w||_1 on standardized features, mapped back
    to the original scale with an unpenalized intercept."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n = len(y)
    mean, sd = X.mean(0), X.std(0)
    scale = np.where(sd <= 1e-12, 1.0, sd)
    Xs = (X - mean) / scale
    yc = y - y.mean()
    L = np.linalg.eigvalsh(Xs.T @ Xs / n).max()
    w = np.zeros(X.shape[1])
    for _ in range(max_iter):
        grad = Xs.T @ (Xs @ w - yc) / n
        w_next = _soft(w - grad / L, lam / L)
        if np.max(np.abs(w_next - w)) < tol:
            w = w_next
            break
        w = w_next
    coef = w / scale
    return float(y.mean() - mean @ coef), coef


class TestOls:
    def test_exact_recovery(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 3))
        y = 2.0 + X @ np.array([1.0, -2.0, 0.5])
        m = fit_ols(X, y)
        assert abs(m.intercept - 2.0) < 1e-10
        assert np.allclose(m.coef, [1.0, -2.0, 0.5], atol=1e-10)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            X = rng.normal(size=(40, 4))
            y = rng.normal(size=40)
            m = fit_ols(X, y)
            D = np.column_stack([np.ones(40), X])
            beta = np.linalg.solve(D.T @ D, D.T @ y)
            assert abs(m.intercept - beta[0]) < 1e-9
            assert np.allclose(m.coef, beta[1:], atol=1e-9)

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        m = fit_ols(X, y)
        r = y - m.predict(X)
        assert np.max(np.abs(X.T @ r)) < 1e-8 * 50
        assert abs(r.sum()) < 1e-8 * 50

    def test_rank_deficient_raises(self):
        X = np.ones((10, 2))
        X[:, 1] = 2.0
        with pytest.raises(np.linalg.LinAlgError, match="rank"):
            fit_ols(X, np.arange(10.0))


class TestLassoFixedPenalty:
    def test_lambda_max_gives_null_model(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(60, 5))
        y = rng.normal(size=60) + X[:, 0]
        grid = penalty_grid_for(X, y)
        m = fit_lasso_at(X, y, grid[0])
        assert np.allclose(m.coef, 0.0)
        assert abs(m.intercept - y.mean()) < 1e-12

    def test_zero_penalty_matches_ols(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(80, 4))
        y = X @ np.array([1.0, 0.0, -1.0, 2.0]) + rng.normal(size=80)
        m = fit_lasso_at(X, y, 0.0)
        ols = fit_ols(X, y)
        assert np.allclose(m.coef, ols.coef, atol=1e-6)
        assert abs(m.intercept - ols.intercept) < 1e-6

    def test_matches_proximal_gradient_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(6):
            n, p = 40, int(rng.integers(2, 6))
            X = rng.normal(size=(n, p)) @ np.diag(rng.uniform(0.5, 3, p))
            w_true = rng.normal(size=p) * (rng.random(p) < 0.7)
            y = X @ w_true + rng.normal(size=n)
            lam = float(rng.uniform(0.01, 0.5))
            m = fit_lasso_at(X, y, lam)
            b0, coef = ista_lasso(X, y, lam)
            assert np.max(np.abs(m.coef - coef)) < 1e-6
            assert abs(m.intercept - b0) < 1e-6

    def test_convergence_error_carries_last_iterate(self):
        rng = np.random.default_rng(6)
        base = rng.normal(size=(50, 1))
        X = base + 0.01 * rng.normal(size=(50, 4))
        y = X @ np.ones(4) + rng.normal(size=50)
        with pytest.raises(LassoConvergenceError) as exc:
            fit_lasso_at(X, y, 0.001, max_passes=1)
        assert exc.value.coef.shape == (4,)
        assert np.isfinite(exc.value.intercept)

    def test_response_scale_equivariance(self):
        # Scaling y and the penalty together scales the solution exactly,
        # so the solver's tolerance behaves the same at any response scale.
        rng = np.random.default_rng(14)
        X = rng.normal(size=(60, 5))
        y = X @ np.array([1.0, 0.0, -2.0, 0.0, 0.5]) + rng.normal(size=60)
        base = fit_lasso_at(X, y, 0.1)
        for c in (1e-4, 1e4):
            m = fit_lasso_at(X, c * y, c * 0.1)
            assert np.allclose(m.coef, c * base.coef, rtol=1e-9, atol=0)
            assert np.isclose(m.intercept, c * base.intercept, rtol=1e-9)

    @pytest.mark.invariants
    @given(seed=st.integers(min_value=0, max_value=10**6))
    @settings(deadline=None, max_examples=30)
    def test_kkt_residuals_property(self, seed):
        rng = np.random.default_rng(seed)
        n, p = 50, 6
        X = rng.normal(size=(n, p))
        y = X @ (rng.normal(size=p) * (rng.random(p) < 0.5)) + rng.normal(size=n)
        lam = float(rng.uniform(0.01, 0.4))
        m = fit_lasso_at(X, y, lam)
        corr, active = kkt_residuals(m, X, y)
        assert np.all(np.abs(corr[~active]) <= lam + 1e-6)
        if active.any():
            w_std = m.coef * X.std(0)
            signs = np.sign(w_std[active])
            assert np.max(np.abs(corr[active] - lam * signs)) < 1e-6


class TestLassoCv:
    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(90, 8))
        y = X[:, 0] - 2 * X[:, 3] + rng.normal(size=90)
        a = fit_lasso(X, y, seed=11)
        b = fit_lasso(X, y, seed=11)
        assert a.penalty == b.penalty
        assert np.array_equal(a.coef, b.coef)

    def test_accepts_shared_fold_assignment(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(40, 3))
        y = X[:, 1] + rng.normal(size=40)
        folds = make_folds(40, 4, seed=2)
        a = fit_lasso(X, y, folds=folds)
        b = fit_lasso(X, y, folds=folds)
        assert a.penalty == b.penalty

    def test_recovers_sparse_signal(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(200, 10))
        y = 3 * X[:, 2] + rng.normal(size=200) * 0.5
        m = fit_lasso(X, y, seed=0)
        assert abs(m.coef[2] - 3.0) < 0.2
        others = np.delete(np.arange(10), 2)
        assert np.max(np.abs(m.coef[others])) < 0.1

    def test_tie_breaks_toward_larger_penalty(self):
        grid = np.array([1.0, 0.5, 0.25, 0.125])
        mse = np.array([2.0, 1.5, 1.5, 1.6])
        assert _select_penalty(grid, mse) == 1
        mse_all_equal = np.ones(4)
        assert _select_penalty(grid, mse_all_equal) == 0

    def test_rejects_ascending_grid(self):
        rng = np.random.default_rng(10)
        X = rng.normal(size=(30, 2))
        y = rng.normal(size=30)
        with pytest.raises(ValueError, match="descending"):
            fit_lasso(X, y, penalty_grid=np.array([0.1, 0.2]))

    def test_grid_spans_paper_ratio(self):
        rng = np.random.default_rng(11)
        X = rng.normal(size=(50, 4))
        y = X[:, 0] + rng.normal(size=50)
        grid = penalty_grid_for(X, y)
        assert len(grid) == 50
        assert np.isclose(grid[-1] / grid[0], 1e-4)
        Xs = (X - X.mean(0)) / X.std(0)
        lam_max = np.max(np.abs(Xs.T @ (y - y.mean())) / 50)
        assert np.isclose(grid[0], lam_max)

    def test_truncates_grid_where_path_stops_converging(self):
        # With a single pass allowed, only the all-zero end of the path
        # converges. Selection must fall back to that prefix instead of
        # failing the fit.
        rng = np.random.default_rng(15)
        X = rng.normal(size=(50, 4))
        y = X @ np.array([2.0, -1.0, 0.0, 0.5]) + rng.normal(size=50)
        lam_max = penalty_grid_for(X, y)[0]
        grid = np.geomspace(10 * lam_max, 0.1 * lam_max, 8)
        m = fit_lasso(X, y, penalty_grid=grid, seed=3, max_passes=1)
        assert m.penalty == grid[0]
        assert np.allclose(m.coef, 0.0)
        assert 0 < len(m.diagnostics["grid"]) < len(grid)
        assert len(m.diagnostics["cv_mse"]) == len(m.diagnostics["grid"])


class TestRidge:
    def test_hand_example(self):
        # centered X = [1, -1], y = [1, -1], alpha=1 -> slope 2/(2+2) = 0.5
        X = np.array([[1.0], [-1.0]])
        y = np.array([1.0, -1.0])
        m = fit_ridge_multi(X, y, alpha=1.0)
        assert np.allclose(m.coef.ravel(), [0.5])
        assert np.allclose(m.intercept, [0.0])

    def test_alpha_zero_is_ols_per_output(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(60, 3))
        Y = rng.normal(size=(60, 2))
        m = fit_ridge_multi(X, Y, alpha=0.0)
        for q in range(2):
            ols = fit_ols(X, Y[:, q])
            assert np.allclose(m.coef[:, q], ols.coef, atol=1e-8)
            assert abs(m.intercept[q] - ols.intercept) < 1e-8

    def test_large_alpha_shrinks_to_mean(self):
        rng = np.random.default_rng(13)
        X = rng.normal(size=(50, 4))
        Y = rng.normal(size=(50, 3))
        m = fit_ridge_multi(X, Y, alpha=1e9)
        assert np.max(np.abs(m.coef)) < 1e-6
        assert np.allclose(m.intercept, Y.mean(0), atol=1e-6)

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            fit_ridge_multi(np.zeros((3, 1)), np.zeros(3), alpha=-1.0)

    def test_prediction_shape(self):
        rng = np.random.default_rng(14)
        m = fit_ridge_multi(rng.normal(size=(30, 2)), rng.normal(size=(30, 5)), 0.1)
        assert m.predict(rng.normal(size=(7, 2))).shape == (7, 5)


class TestPca:
    def test_line_recovers_direction(self):
        rng = np.random.default_rng(15)
        t = rng.normal(size=100)
        direction = np.array([3.0, 4.0]) / 5.0
        X = np.outer(t, direction)
        proj = fit_pca(X + 1e-13 * rng.normal(size=X.shape), d=1)
        assert np.allclose(np.abs(proj.W @ direction), 1.0, atol=1e-6)

    def test_orthonormal_rows(self):
        rng = np.random.default_rng(16)
        X = rng.normal(size=(80, 6))
        proj = fit_pca(X, d=4)
        assert np.allclose(proj.W @ proj.W.T, np.eye(4), atol=1e-10)

    def test_explained_variance_sorted(self):
        rng = np.random.default_rng(17)
        X = rng.normal(size=(100, 5)) * [5, 3, 1, 0.5, 0.1]
        proj = fit_pca(X, d=5)
        ev = proj.explained_variance
        assert np.all(np.diff(ev) <= 1e-12)

    def test_reconstruction_error_equals_discarded_eigenvalues(self):
        # build a sample with exact spectrum {4, 1, 0.25} of X'X/n
        rng = np.random.default_rng(18)
        n = 64
        raw = rng.normal(size=(n, 3))
        raw -= raw.mean(0)
        U, _, _ = np.linalg.svd(raw, full_matrices=False)
        Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        lams = np.array([4.0, 1.0, 0.25])
        X = U @ np.diag(np.sqrt(n * lams)) @ Q.T
        for d, discarded in [(2, 0.25), (1, 1.25)]:
            proj = fit_pca(X, d=d)
            emb = proj.apply(X)
            recon = (emb - proj.offset) @ proj.W + X.mean(0)
            err = np.mean(np.sum((X - recon) ** 2, axis=1))
            assert abs(err - discarded) < 1e-8

    def test_rank_truncation_warns(self):
        rng = np.random.default_rng(19)
        t = rng.normal(size=(50, 2))
        X = np.column_stack([t, t @ np.ones(2)])
        with pytest.warns(UserWarning, match="rank"):
            proj = fit_pca(X, d=3)
        assert proj.out_dim == 2

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(20)
        X = rng.normal(size=(60, 4))
        a = fit_pca(X, d=2)
        b = fit_pca(X[::-1].copy(), d=2)
        assert np.allclose(a.W, b.W, atol=1e-8)


class TestRctEncoder:
    def _setup(self, d, seed=21):
        rng = np.random.default_rng(seed)
        layout = CovariateLayout(p_u=2, p_z=4, p_v=3)
        Z = rng.normal(size=(100, layout.p_z))
        V = Z @ rng.normal(size=(layout.p_z, layout.p_v)) + 0.1 * rng.normal(
            size=(100, layout.p_v)
        )
        imputer = fit_ridge_multi(Z, V, alpha=0.1)
        X_os = np.column_stack([Z, V])
        proj = fit_pca(X_os, d=d) if d < layout.p_o else identity_projection(layout.p_o)
        return layout, imputer, proj, rng

    def test_defining_identity(self):
        layout, imputer, proj, rng = self._setup(d=3)
        enc = build_rct_encoder_linear(proj, imputer, layout)
        X_r = rng.normal(size=(25, layout.p_r))
        Z = X_r[:, layout.p_u :]
        direct = proj.apply(np.column_stack([Z, imputer.predict(Z)]))
        assert np.max(np.abs(enc.apply(X_r) - direct)) < 1e-12

    def test_u_columns_zero_weight(self):
        layout, imputer, proj, _ = self._setup(d=3)
        enc = build_rct_encoder_linear(proj, imputer, layout)
        assert np.allclose(enc.W[:, : layout.p_u], 0.0)

    def test_zero_imputer_keeps_z_path_only(self):
        layout, _, proj, rng = self._setup(d=3)
        zero_imp = fit_ridge_multi(
            rng.normal(size=(50, layout.p_z)), np.zeros((50, layout.p_v)), alpha=1.0
        )
        enc = build_rct_encoder_linear(proj, zero_imp, layout)
        X_r = rng.normal(size=(10, layout.p_r))
        Z = X_r[:, layout.p_u :]
        direct = proj.apply(np.column_stack([Z, np.zeros((10, layout.p_v))]))
        assert np.max(np.abs(enc.apply(X_r) - direct)) < 1e-12

    def test_full_width_identity_variant_imputes(self):
        layout, imputer, proj, rng = self._setup(d=99)
        enc = build_rct_encoder_linear(proj, imputer, layout)
        X_r = rng.normal(size=(10, layout.p_r))
        Z = X_r[:, layout.p_u :]
        expect = np.column_stack([Z, imputer.predict(Z)])
        assert np.max(np.abs(enc.apply(X_r) - expect)) < 1e-12

    def test_dimension_mismatch_rejected(self):
        layout, imputer, proj, _ = self._setup(d=3)
        bad_layout = CovariateLayout(p_u=2, p_z=5, p_v=3)
        with pytest.raises(ValueError):
            build_rct_encoder_linear(proj, imputer, bad_layout)
