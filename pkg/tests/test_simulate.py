import numpy as np
import pytest

from jointscan.simulate import SimConfig, simulate_arrays, simulate_dataset


class TestSimulate:
    def test_symmetric_causes_split_evenly(self):
        c = SimConfig(n=10000, seed=41, gamma=np.zeros((2, 2)), nu=np.zeros((2, 2)),
                      baseline_hazards=[0.07, 0.07])
        D = simulate_arrays(c)["D"]
        events = D[D > 0]
        share = np.mean(events == 1)
        assert abs(share - 0.5) <= 3 * np.sqrt(0.25 / len(events))

    def test_noiseless_responses(self):
        c = SimConfig(n=50, seed=42, Sigma=np.zeros((2, 2)), sigma2=0.0)
        ds = simulate_dataset(c)
        x2 = ds.W[ds.obs_subject, 1]
        np.testing.assert_allclose(ds.y, 5.0 + 1.0 * ds.obs_times + 2.0 * x2, rtol=0, atol=1e-12)

    def test_sub_distribution_matches_analytic(self):
        c = SimConfig(n=20000, seed=43)
        a = simulate_arrays(c)
        W = np.column_stack([a["x1"], a["x2"]])
        h = c.baseline_hazards * np.exp(W @ c.gamma.T + a["b"] @ c.nu.T)      # (n, K)
        rate = h.sum(axis=1) + 1.0 / c.censor_mean
        for t in (2.0, 8.0, 20.0):
            p = h / rate[:, None] * (1 - np.exp(-rate * t))[:, None]
            for k in range(2):
                hit = (a["T"] <= t) & (a["D"] == k + 1)
                resid = hit - p[:, k]
                se = resid.std(ddof=1) / np.sqrt(c.n)
                assert abs(resid.mean()) <= 2 * se, (t, k, resid.mean(), se)

    def test_covariate_moments(self):
        a = simulate_arrays(SimConfig(n=10000, seed=44))
        n = 10000
        assert abs(a["x1"].mean() - 2.0) <= 4 / np.sqrt(n)
        assert abs(a["x1"].var() - 1.0) <= 4 * np.sqrt(2 / n)
        assert abs(a["x2"].mean() - 0.5) <= 4 * 0.5 / np.sqrt(n)

    def test_reproducible_and_stream_per_subject(self):
        a = simulate_arrays(SimConfig(n=200, seed=45))
        b = simulate_arrays(SimConfig(n=200, seed=45))
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])
        small = simulate_arrays(SimConfig(n=100, seed=45))
        np.testing.assert_array_equal(small["T"], a["T"][:100])
        np.testing.assert_array_equal(small["b"], a["b"][:100])

    def test_dropout_rule(self):
        ds = simulate_dataset(SimConfig(n=500, seed=46))
        assert np.all(ds.obs_times <= ds.T[ds.obs_subject])
        assert ds.n_obs.max() <= 30

    @pytest.mark.parametrize("kw", [dict(n=0), dict(baseline_hazards=[0.0, 0.1]),
                                    dict(censor_mean=0.0), dict(sigma2=-1.0), dict(max_visits=0)])
    def test_rejects_bad_config(self, kw):
        with pytest.raises(ValueError):
            SimConfig(**kw)
