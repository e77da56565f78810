import numpy as np
import pytest

from paneltensor import (
    SimScenario,
    SolverConfig,
    estimate_delta,
    generate,
    propensity_mask,
    rate_experiment,
    run_comparison,
)
from paneltensor.simulate import mcar_within_season_mask


class TestGenerate:
    def test_fixed_seed_identical(self):
        s = SimScenario(which="S2", seed=5)
        d1, y1 = generate(s)
        d2, y2 = generate(s)
        assert np.array_equal(y1, y2)
        assert np.array_equal(d1.y_obs, d2.y_obs)
        assert np.array_equal(d1.w, d2.w)
        assert np.array_equal(d1.controls[0], d2.controls[0])

    def test_different_seeds_differ(self):
        d1, _ = generate(SimScenario(which="S1", seed=1))
        d2, _ = generate(SimScenario(which="S1", seed=2))
        assert not np.array_equal(d1.y_obs, d2.y_obs)

    def test_masked_count(self):
        for mech in ("mcar", "mcar_within_season", "propensity"):
            d, _ = generate(SimScenario(which="S1", mechanism=mech, seed=3))
            assert int(d.w.sum()) == 100

    def test_treated_cells_hold_reduced_outcome(self):
        s = SimScenario(which="S1", seed=7)
        d, y0 = generate(s)
        tr = d.w == 1
        assert np.allclose(d.y_obs[tr], 0.9 * y0[tr])
        assert np.array_equal(d.y_obs[~tr], y0[~tr])

    def test_ground_truth_delta_is_exact(self):
        d, y0 = generate(SimScenario(which="S3", seed=11))
        est = estimate_delta(d.y_obs, y0, d.w)
        assert abs(est.delta_hat - (1 / 0.9 - 1)) < 1e-12

    def test_moment_oracle_zero_effects(self):
        # with both effect levels at zero and vanishing dispersion the
        # primary outcome is a unit-mean count
        s = SimScenario(which="S1", n_units=50, n_periods=8, effect_mean=0.0,
                        effect_sd=1e-12, dispersion=1e-6, n_missing=1, seed=13)
        draws = []
        for rep in range(250):
            _, y0 = generate(SimScenario(**{**s.__dict__, "seed": 1000 + rep}))
            draws.append(y0.ravel())
        mean = float(np.mean(np.concatenate(draws)))
        assert abs(mean - 1.0) < 0.02

    def test_seasonal_component_odd_columns(self):
        # the cyclical bump adds ~5000 to odd periods (1-based) of the primary
        # outcome only; averaging over seeds isolates it from the count noise
        diffs = []
        for seed in range(100):
            _, y0 = generate(SimScenario(which="S3", seed=4000 + seed))
            odd = y0[:, ::2].mean()   # 0-based even columns = 1-based odd periods
            even = y0[:, 1::2].mean()
            diffs.append(odd - even)
        assert 4000 < float(np.mean(diffs)) < 6000

    def test_seasonal_component_absent_in_control(self):
        diffs = []
        for seed in range(60):
            d, _ = generate(SimScenario(which="S3", seed=6000 + seed))
            z = d.controls[0]
            diffs.append(z[:, ::2].mean() - z[:, 1::2].mean())
        assert abs(float(np.mean(diffs))) < 1500

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            SimScenario(which="S4")
        with pytest.raises(ValueError):
            SimScenario(n_missing=0)
        with pytest.raises(ValueError):
            SimScenario(mechanism="bogus")


class TestMasks:
    def test_within_season_remainders_to_earliest(self):
        rng = np.random.default_rng(0)
        w = mcar_within_season_mask((12, 4), 10, rng)
        assert w.sum(axis=0).tolist() == [3.0, 3.0, 2.0, 2.0]

    def test_within_season_divisible(self):
        rng = np.random.default_rng(1)
        w = mcar_within_season_mask((12, 4), 8, rng)
        assert w.sum(axis=0).tolist() == [2.0] * 4

    def test_propensity_avoids_high_cells(self):
        # a cell far above its period mean is essentially never chosen
        y0 = np.ones((20, 2))
        y0[:, 0] = np.linspace(1.0, 2.0, 20)
        y0[:, 1] = np.linspace(1.0, 2.0, 20)
        y0[0, 0] = 1e6
        picked = 0
        for seed in range(10000):
            w = propensity_mask(y0, 1, seed=seed)
            picked += int(w[0, 0] == 1.0)
        assert picked < 100  # < 1% of draws

    def test_propensity_all_cells(self):
        y0 = np.random.default_rng(2).uniform(1, 5, size=(6, 4))
        w = propensity_mask(y0, 24, seed=0)
        assert w.sum() == 24

    def test_propensity_constant_column_flagged(self):
        y0 = np.random.default_rng(3).uniform(1, 5, size=(6, 3))
        y0[:, 1] = 2.0
        with pytest.warns(RuntimeWarning):
            w = propensity_mask(y0, 5, seed=1)
        assert w.sum() == 5

    def test_propensity_deterministic(self):
        y0 = np.random.default_rng(4).uniform(1, 5, size=(8, 4))
        assert np.array_equal(propensity_mask(y0, 6, seed=9), propensity_mask(y0, 6, seed=9))


class TestRunComparison:
    def test_structure_and_determinism(self):
        s = SimScenario(which="S1", n_units=15, n_periods=6, n_missing=12, seed=0)
        r1 = run_comparison(s, methods=("LL1", "TC"), reps=2, seed=3)
        r2 = run_comparison(s, methods=("LL1", "TC"), reps=2, seed=3)
        assert abs(r1.truth_delta - (1 / 0.9 - 1)) < 1e-12
        for m in ("LL1", "TC"):
            assert r1.per_method[m].delta_hats == r2.per_method[m].delta_hats
            assert len(r1.per_method[m].delta_hats) == 2
            for cell_list in r1.per_method[m].mape_per_cell:
                assert len(cell_list) == 12
                assert np.all(np.isfinite(cell_list))

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            run_comparison(SimScenario(), methods=("XX",), reps=1, seed=0)


class TestRateExperiment:
    def test_noiseless_recovery_all_layers(self):
        cfg = SolverConfig(lam=0.0, continuation=True, continuation_steps=15,
                           max_iters=6000, tol=1e-13, center=False, debias=False)
        tab = rate_experiment(2, 50, 8, [1, 2, 4, 8], 0.0, seed=0, lam=1e-9,
                              base_cfg=cfg, n_masked=40)
        for _, rmse in tab:
            assert rmse < 1e-3

    def test_more_layers_reduce_error(self):
        wins = 0
        for seed in range(5):
            tab = rate_experiment(2, 50, 8, [1, 8], 0.5, seed=seed)
            rmses = dict(tab)
            wins += int(rmses[8] < rmses[1])
        assert wins >= 4

    def test_noise_doubling_roughly_doubles_rmse(self):
        ratios = []
        for seed in (3, 5, 7):
            r1 = np.mean([r for _, r in rate_experiment(2, 50, 8, [2, 4], 0.5,
                                                        seed=seed, n_masked=60)])
            r2 = np.mean([r for _, r in rate_experiment(2, 50, 8, [2, 4], 1.0,
                                                        seed=seed, n_masked=60)])
            ratios.append(r2 / r1)
        assert 1.2 <= float(np.mean(ratios)) <= 2.8

    def test_rank_guard(self):
        with pytest.raises(ValueError):
            rate_experiment(9, 50, 8, [1], 0.1, seed=0)
