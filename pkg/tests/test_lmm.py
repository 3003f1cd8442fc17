import numpy as np
import pytest

from jointscan.lmm import LmmFit, empirical_bayes_all, fit_lmm, lmm_loglik
from jointscan.model import Dataset, LongitudinalObs, ModelError, Subject
from jointscan.simulate import SimConfig, simulate_dataset

from oracles import naive_eb

NO_DROPOUT = dict(baseline_hazards=[1e-9, 1e-9], censor_mean=1e9)


def balanced_intercept_only(rng, n=40, visits=5):
    """Noise centred within each subject: no between-subject variation at all."""
    subs = []
    for i in range(n):
        e = rng.normal(size=visits)
        e -= e.mean()
        obs = [LongitudinalObs(float(t), 1.0 + 0.5 * t + e[t], [1.0, t], [1.0]) for t in range(visits)]
        subs.append(Subject.from_observations(str(i), obs, [0.0], float(visits), 0))
    return Dataset.from_subjects(subs, 1)


class TestFitLmm:
    def test_zero_random_effect_gives_ols(self):
        ds = balanced_intercept_only(np.random.default_rng(0))
        fit = fit_lmm(ds)
        ols = np.linalg.lstsq(ds.X, ds.y, rcond=None)[0]
        np.testing.assert_allclose(fit.beta_hat, ols, atol=1e-6)
        assert fit.Sigma_hat[0, 0] < 1e-2 * fit.sigma2_hat

    def test_mle_dominates_truth_on_toy_data(self):
        c = SimConfig(n=50, seed=4, **NO_DROPOUT)
        ds = simulate_dataset(c)
        fit = fit_lmm(ds, tol=1e-9, max_iter=5000)
        assert fit.loglik >= lmm_loglik(ds, c.beta, c.sigma2, c.Sigma)

    def test_loglik_nondecreasing(self):
        ds = simulate_dataset(SimConfig(n=200, seed=5))
        fit = fit_lmm(ds)
        assert np.all(np.diff(fit.loglik_trace) >= -1e-8)

    def test_rank_deficiency_names_columns(self):
        ds = simulate_dataset(SimConfig(n=30, seed=1))
        X = np.column_stack([ds.X, 2 * ds.X[:, 1]])
        bad = Dataset(ds.ids, ds.obs_subject, ds.obs_times, ds.y, X, ds.Z, ds.W, ds.T, ds.D, 2,
                      fixed_names=ds.fixed_names + ["twice_time"])
        with pytest.raises(ModelError, match="twice_time"):
            fit_lmm(bad)

    def test_no_longitudinal_data(self):
        ds = Dataset.from_subjects([Subject.from_observations("a", [], [0.0], 1.0, 0, p=1, q=1)], 1)
        with pytest.raises(ModelError, match="no longitudinal"):
            fit_lmm(ds)

    @pytest.mark.slow
    def test_recovery_without_dropout(self):
        c = SimConfig(**NO_DROPOUT)
        est = []
        for r in range(50):
            ds = simulate_dataset(SimConfig(n=2000, seed=500 + r, **NO_DROPOUT))
            f = fit_lmm(ds)
            est.append(np.concatenate([f.beta_hat, [f.sigma2_hat], f.Sigma_hat[np.tril_indices(2)]]))
        est = np.array(est)
        truth = np.concatenate([c.beta, [c.sigma2], c.Sigma[np.tril_indices(2)]])
        mcse = est.std(axis=0, ddof=1) / np.sqrt(len(est))
        assert np.all(np.abs(est.mean(axis=0) - truth) <= 3 * mcse)


class TestEmpiricalBayes:
    def test_subject_without_observations_gets_prior(self):
        ds = simulate_dataset(SimConfig(n=20, seed=2))
        subs = ds.subjects + [Subject.from_observations("empty", [], ds.W[0], 3.0, 0, p=3, q=2)]
        ds2 = Dataset.from_subjects(subs, 2)
        fit = fit_lmm(ds2)
        eb = empirical_bayes_all(ds2, fit)
        np.testing.assert_array_equal(eb.b_tilde[-1], 0.0)
        np.testing.assert_array_equal(eb.H_inv[-1], fit.Sigma_hat)

    def test_scalar_conjugate_formula(self):
        s = Subject.from_observations("a", [LongitudinalObs(0.0, 3.0, [1.0], [1.0])], [0.0], 1.0, 0)
        s2 = Subject.from_observations("b", [LongitudinalObs(0.0, 0.5, [1.0], [1.0])], [0.0], 1.0, 0)
        ds = Dataset.from_subjects([s, s2], 1)
        beta, Sig, sig2 = 1.25, 0.7, 0.4
        eb = empirical_bayes_all(ds, LmmFit(np.array([beta]), sig2, np.array([[Sig]]), 0.0, 1))
        assert eb.b_tilde[0, 0] == pytest.approx(Sig * (3.0 - beta) / (Sig + sig2), rel=1e-14)

    def test_cached_sum_matches_naive(self):
        ds = simulate_dataset(SimConfig(n=200, seed=3))
        fit = fit_lmm(ds)
        eb = empirical_bayes_all(ds, fit)
        centers, covs = naive_eb(ds, fit)
        err_b = np.linalg.norm(eb.b_tilde - centers, axis=1) / np.linalg.norm(centers, axis=1)
        assert err_b.max() <= 1e-12
        err = np.linalg.norm(eb.H_inv - covs, axis=(1, 2)) / np.linalg.norm(covs, axis=(1, 2))
        assert err.max() <= 1e-12

    def test_factor_reproduces_covariance(self):
        ds = simulate_dataset(SimConfig(n=150, seed=6))
        eb = empirical_bayes_all(ds, fit_lmm(ds))
        R = eb.H_inv_sqrt
        err = np.linalg.norm(R @ np.swapaxes(R, 1, 2) - eb.H_inv, axis=(1, 2)) / np.linalg.norm(eb.H_inv, axis=(1, 2))
        assert err.max() <= 1e-10
        assert np.all(np.linalg.eigvalsh(eb.H_inv) > 0)
