import numpy as np
import pytest

from paneltensor import (
    CovariateModel,
    MaskedMatrix,
    SoftImpute,
    SolverConfig,
    complete,
    complete_with_covariates,
    cross_validate_lambda,
    default_lambda_grid,
    observed_operator_norm,
    svt,
)


def nuclear_norm(m):
    return float(np.linalg.svd(m, compute_uv=False).sum())


def prox_objective(x, m, lam):
    return 0.5 * float(np.sum((x - m) ** 2)) + lam * nuclear_norm(x)


def masked_objective(x, mm, lam):
    return 0.5 * float(np.sum((mm.values[mm.observed] - x[mm.observed]) ** 2)) + lam * nuclear_norm(x)


class TestMaskedMatrix:
    def test_from_dense_roundtrip(self):
        x = np.array([[1.0, np.nan], [3.0, 4.0]])
        mm = MaskedMatrix.from_dense(x)
        assert mm.n_observed == 3
        back = mm.to_dense()
        assert np.isnan(back[0, 1]) and back[1, 0] == 3.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            MaskedMatrix(values=np.ones((2, 2)), observed=np.ones((2, 3), dtype=bool))

    def test_observed_indices_order(self):
        mm = MaskedMatrix(values=np.ones((2, 2)), observed=np.array([[True, False], [True, True]]))
        assert mm.observed_indices().tolist() == [[0, 0], [1, 0], [1, 1]]


class TestSVT:
    def test_closed_form_diag(self):
        out = svt(np.diag([5.0, 1.0]), 2.0)
        assert np.allclose(out, np.diag([3.0, 0.0]), atol=1e-12)

    def test_lambda_zero_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(4, 6))
        assert np.allclose(svt(m, 0.0), m, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_randomized_minimization_oracle(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(3, 3))
        lam = 0.7
        out = svt(m, lam)
        best = prox_objective(out, m, lam)
        # candidate cloud around both the input and the output
        cands = np.concatenate([
            m[None] + rng.normal(scale=0.5, size=(5000, 3, 3)),
            out[None] + rng.normal(scale=0.2, size=(5000, 3, 3)),
        ])
        svals = np.linalg.svd(cands, compute_uv=False)
        objs = 0.5 * np.sum((cands - m[None]) ** 2, axis=(1, 2)) + lam * svals.sum(axis=1)
        assert best <= objs.min() + 1e-10
        assert best <= prox_objective(m, m, lam) + 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_nonexpansive(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(5, 4))
        lam = abs(rng.normal()) + 0.1
        lhs = np.linalg.norm(svt(a, lam) - svt(b, lam))
        assert lhs <= np.linalg.norm(a - b) + 1e-10

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            svt(np.eye(2), -1.0)


class TestComplete:
    def test_fully_observed_lam_zero_exact(self):
        y = np.arange(12.0).reshape(3, 4)
        fit = complete(MaskedMatrix.from_dense(y), SolverConfig(lam=0.0))
        assert np.array_equal(fit.theta_hat, y)
        assert fit.iterations == 1 and fit.converged

    def test_empty_mask_raises(self):
        mm = MaskedMatrix(values=np.ones((2, 2)), observed=np.zeros((2, 2), dtype=bool))
        with pytest.raises(ValueError):
            complete(mm, SolverConfig(lam=0.1))

    def test_nonfinite_observed_raises(self):
        vals = np.array([[1.0, np.inf], [0.0, 1.0]])
        mm = MaskedMatrix(values=vals, observed=np.ones((2, 2), dtype=bool))
        with pytest.raises(ValueError):
            complete(mm, SolverConfig(lam=0.1))

    def test_rank1_missing_entry_recovered(self):
        rng = np.random.default_rng(0)
        truth = np.outer(rng.normal(size=6), rng.normal(size=5))
        x = truth.copy()
        x[2, 3] = np.nan
        mm = MaskedMatrix.from_dense(x)
        cfg = SolverConfig(
            lam=1e-10 * observed_operator_norm(mm), continuation=True,
            continuation_steps=20, max_iters=20000, tol=1e-15,
        )
        fit = complete(mm, cfg)
        assert abs(fit.theta_hat[2, 3] - truth[2, 3]) / abs(truth[2, 3]) < 1e-6

    def test_noiseless_rank2_50x40(self):
        rng = np.random.default_rng(1)
        truth = rng.normal(size=(50, 2)) @ rng.normal(size=(2, 40))
        mask = np.ones(50 * 40, dtype=bool)
        mask[rng.choice(50 * 40, size=100, replace=False)] = False
        mm = MaskedMatrix(values=truth, observed=mask.reshape(50, 40))
        cfg = SolverConfig(
            lam=1e-8 * observed_operator_norm(mm), continuation=True,
            continuation_steps=15, max_iters=3000, tol=1e-13,
        )
        fit = complete(mm, cfg)
        miss = ~mm.observed
        rel = np.linalg.norm(fit.theta_hat[miss] - truth[miss]) / np.linalg.norm(truth[miss])
        assert rel < 1e-3

    @pytest.mark.parametrize("seed", range(8))
    def test_objective_trace_monotone(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=(12, 9))
        mask = rng.random((12, 9)) < 0.6
        mm = MaskedMatrix(values=y, observed=mask)
        fit = complete(mm, SolverConfig(lam=0.8))
        diffs = np.diff(fit.objective_trace)
        assert np.all(diffs <= 1e-10)

    def test_zero_solution_above_operator_norm(self):
        rng = np.random.default_rng(5)
        y = rng.normal(size=(8, 6))
        mask = rng.random((8, 6)) < 0.7
        mm = MaskedMatrix(values=y, observed=mask)
        lam = observed_operator_norm(mm) * (1 + 1e-9)
        fit = complete(mm, SolverConfig(lam=lam, max_iters=200))
        assert np.max(np.abs(fit.theta_hat)) == 0.0
        assert fit.rank_hat == 0

    def test_rank_nonincreasing_in_lambda(self):
        rng = np.random.default_rng(9)
        y = rng.normal(size=(15, 10))
        mask = rng.random((15, 10)) < 0.8
        mm = MaskedMatrix(values=y, observed=mask)
        grid = default_lambda_grid(mm, n=8, floor=1e-2)
        ranks = [complete(mm, SolverConfig(lam=l)).rank_hat for l in grid]
        assert all(r1 <= r2 for r1, r2 in zip(ranks[:-1], ranks[1:]))  # grid is descending

    def test_rank_cap_agrees_with_full_svd(self):
        # cap above the active rank: the truncated path must match the full one
        rng = np.random.default_rng(3)
        truth = rng.normal(size=(20, 3)) @ rng.normal(size=(3, 15))
        mask = rng.random((20, 15)) < 0.8
        mm = MaskedMatrix(values=truth, observed=mask)
        lam = 1e-7 * observed_operator_norm(mm)
        kw = dict(lam=lam, continuation=True, continuation_steps=12,
                  max_iters=4000, tol=1e-14)
        full = complete(mm, SolverConfig(**kw)).theta_hat
        capped = complete(mm, SolverConfig(**kw, svd_rank_cap=8)).theta_hat
        assert np.max(np.abs(full - capped)) < 1e-8
        again = complete(mm, SolverConfig(**kw, svd_rank_cap=8)).theta_hat
        assert np.array_equal(capped, again)

    def test_empty_row_extrapolated(self):
        # staggered-adoption shape: one unit fully unobserved
        rng = np.random.default_rng(4)
        truth = np.outer(rng.normal(size=7) + 3, rng.normal(size=6) + 3)
        mask = np.ones((7, 6), dtype=bool)
        mask[0, :] = False
        mm = MaskedMatrix(values=truth, observed=mask)
        fit = complete(mm, SolverConfig(lam=1e-6, continuation=True, max_iters=500))
        assert np.all(np.isfinite(fit.theta_hat[0]))

    def test_deterministic(self):
        rng = np.random.default_rng(10)
        y = rng.normal(size=(9, 7))
        mask = rng.random((9, 7)) < 0.5
        mm = MaskedMatrix(values=y, observed=mask)
        f1 = complete(mm, SolverConfig(lam=0.3))
        f2 = complete(mm, SolverConfig(lam=0.3))
        assert np.array_equal(f1.theta_hat, f2.theta_hat)


class TestCovariates:
    def test_empty_model_reduces_to_complete(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=(10, 8))
        mask = rng.random((10, 8)) < 0.7
        mm = MaskedMatrix(values=y, observed=mask)
        cfg = SolverConfig(lam=0.4)
        plain = complete(mm, cfg)
        with_cov = complete_with_covariates(mm, CovariateModel(), cfg)
        assert np.array_equal(plain.theta_hat, with_cov.theta_hat)

    def test_exact_covariate_instance(self):
        rng = np.random.default_rng(1)
        n, t, dn, dt = 12, 10, 2, 3
        xn = rng.normal(size=(n, dn))
        xt = rng.normal(size=(dt, t))
        b_true = rng.normal(size=(dn, dt))
        y = xn @ b_true @ xt
        mask = rng.random((n, t)) < 0.8
        mm = MaskedMatrix(values=y, observed=mask)
        lam = observed_operator_norm(mm)  # large: shrink the low-rank part away
        cov = CovariateModel(X_N=xn, X_T=xt)
        fit = complete_with_covariates(mm, cov, SolverConfig(lam=lam, max_iters=300, tol=1e-12))
        assert np.allclose(fit.covariates.B_hat, b_true, atol=1e-8)
        low_rank = fit.theta_hat - xn @ fit.covariates.B_hat @ xt
        assert np.max(np.abs(low_rank)) < 1e-8

    def test_intercept_shift_recovered(self):
        rng = np.random.default_rng(2)
        base = np.outer(rng.normal(size=8), rng.normal(size=6))
        shift = 3.5
        y = base + shift
        mask = rng.random((8, 6)) < 0.9
        mm = MaskedMatrix(values=y, observed=mask)
        cov = CovariateModel(unit_time_covariates=[np.ones((8, 6))])
        fit = complete_with_covariates(mm, cov, SolverConfig(lam=1e-6, continuation=True,
                                                             max_iters=500, tol=1e-12))
        # the constant is split between the covariate and the rest of the fit;
        # the fitted values must reproduce the data on observed entries
        assert np.allclose(fit.theta_hat[mask], y[mask], atol=1e-4)
        assert fit.covariates.unit_time_coefs.shape == (1,)

    def test_joint_objective_nonincreasing(self):
        rng = np.random.default_rng(3)
        n, t = 10, 8
        xn = rng.normal(size=(n, 2))
        y = xn @ rng.normal(size=(2, t)) + 0.3 * rng.normal(size=(n, t))
        mask = rng.random((n, t)) < 0.75
        mm = MaskedMatrix(values=y, observed=mask)
        cov = CovariateModel(X_N=xn)
        fit = complete_with_covariates(mm, cov, SolverConfig(lam=0.5, max_iters=200))
        assert len(fit.objective_trace) >= 2  # the alternation really iterated
        diffs = np.diff(fit.objective_trace)
        assert np.all(diffs <= 1e-10)

    def test_alternation_disentangles_covariate_from_means(self):
        # the coefficient, the two-way means and the low-rank block overlap;
        # a single alternation pass leaves the split unbalanced, so the fit
        # must iterate until the coefficient lands on the generating value
        rng = np.random.default_rng(6)
        n, t = 30, 12
        u_cov = rng.uniform(0.5, 1.5, size=(n, t))
        low = np.outer(rng.normal(size=n), rng.normal(size=t))
        y = -5.0 + low + 2.0 * u_cov + 0.05 * rng.normal(size=(n, t))
        mask = rng.random((n, t)) < 0.8
        mm = MaskedMatrix(values=y, observed=mask)
        cov = CovariateModel(unit_time_covariates=[u_cov])
        cfg = SolverConfig(lam=0.5, center=True, max_iters=500, tol=1e-10)
        fit = complete_with_covariates(mm, cov, cfg)
        assert fit.iterations >= 2
        assert fit.converged
        assert abs(fit.covariates.unit_time_coefs[0] - 2.0) < 0.1

    def test_rank_deficient_design_flagged(self):
        rng = np.random.default_rng(4)
        n, t = 6, 5
        dup = rng.normal(size=(n, t))
        y = rng.normal(size=(n, t))
        mm = MaskedMatrix(values=y, observed=np.ones((n, t), dtype=bool))
        cov = CovariateModel(unit_time_covariates=[dup, dup])  # perfectly collinear
        with pytest.warns(RuntimeWarning):
            fit = complete_with_covariates(mm, cov, SolverConfig(lam=10.0, max_iters=50))
        assert fit.covariate_rank_deficient


class TestCrossValidate:
    def _rank1_instance(self, seed=0, missing=6):
        rng = np.random.default_rng(seed)
        truth = np.outer(rng.normal(size=10) + 2, rng.normal(size=8) + 2)
        mask = np.ones(80, dtype=bool)
        mask[rng.choice(80, size=missing, replace=False)] = False
        return MaskedMatrix(values=truth, observed=mask.reshape(10, 8)), truth

    def test_single_value_grid(self):
        mm, _ = self._rank1_instance()
        lam, table = cross_validate_lambda(mm, [0.25], folds=5, seed=0)
        assert lam == 0.25 and len(table) == 1

    def test_noiseless_small_lambda_wins(self):
        mm, _ = self._rank1_instance()
        top = observed_operator_norm(mm)
        lam, table = cross_validate_lambda(mm, [0.01, 10 * top], folds=5, seed=1)
        assert lam == 0.01

    def test_deterministic_table(self):
        mm, _ = self._rank1_instance(seed=2)
        grid = default_lambda_grid(mm, n=6)
        one = cross_validate_lambda(mm, grid, folds=4, seed=7)
        two = cross_validate_lambda(mm, grid, folds=4, seed=7)
        assert one == two

    def test_negative_grid_rejected(self):
        mm, _ = self._rank1_instance()
        with pytest.raises(ValueError):
            cross_validate_lambda(mm, [-0.1, 0.2], folds=3, seed=0)

    def test_loocv_allowed(self):
        mm, _ = self._rank1_instance(seed=3, missing=70)  # only 10 observed
        lam, table = cross_validate_lambda(mm, [0.05, 0.5], folds=mm.n_observed, seed=0)
        assert np.isfinite(table[0][1])

    def test_ties_break_to_larger(self):
        # grid with duplicated value: both fold errors identical, larger kept
        mm, _ = self._rank1_instance(seed=4)
        lam, _ = cross_validate_lambda(mm, [0.3, 0.3], folds=3, seed=0)
        assert lam == 0.3

    def test_fold_bounds(self):
        mm, _ = self._rank1_instance()
        with pytest.raises(ValueError):
            cross_validate_lambda(mm, [0.1], folds=1, seed=0)
        with pytest.raises(ValueError):
            cross_validate_lambda(mm, [0.1], folds=mm.n_observed + 1, seed=0)


class TestSoftImputeEstimator:
    def test_fit_transform_fills_nans(self):
        rng = np.random.default_rng(0)
        truth = np.outer(rng.normal(size=8) + 2, rng.normal(size=6) + 2)
        x = truth.copy()
        x[1, 2] = np.nan
        est = SoftImpute(lam=1e-9, continuation=True, max_iters=5000, tol=1e-14)
        filled = est.fit_transform(x)
        assert abs(filled[1, 2] - truth[1, 2]) / abs(truth[1, 2]) < 1e-4
        # observed entries pass through untouched
        assert filled[0, 0] == x[0, 0]

    def test_get_params_roundtrip(self):
        est = SoftImpute(lam=0.5, center=True)
        params = est.get_params()
        est2 = SoftImpute(**params)
        assert est2.lam == 0.5 and est2.center

    def test_sklearn_clone(self):
        from sklearn.base import clone

        est = SoftImpute(lam=0.1, debias=True)
        cl = clone(est)
        assert cl.lam == 0.1 and cl.debias

    def test_transform_before_fit(self):
        with pytest.raises(ValueError):
            SoftImpute().transform(np.ones((2, 2)))

    def test_transform_shape_guard(self):
        est = SoftImpute(lam=0.0).fit(np.ones((2, 2)))
        with pytest.raises(ValueError):
            est.transform(np.ones((3, 3)))
