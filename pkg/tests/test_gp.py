import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asyncgp.errors import InputError
from asyncgp.gp import GPConfig, OnlineGP, Posterior, chol_rank1_update, error_bound
from asyncgp.kernels import KernelSpec, kernel_matrix


def make_gp(max_data=100, noise=0.1, dim=1, **kw):
    spec = KernelSpec.from_params("se", dim=dim, **kw)
    return OnlineGP(GPConfig(kernel=spec, noise_std=noise, max_data=max_data))


def dense_posterior(spec, X, y, x, noise, m=0.0):
    K = kernel_matrix(spec, X) + noise**2 * np.eye(len(X))
    k = kernel_matrix(spec, X, x[None, :])[:, 0]
    mean = m + k @ np.linalg.solve(K, y - m)
    var = kernel_matrix(spec, x[None, :])[0, 0] - k @ np.linalg.solve(K, k)
    return mean, math.sqrt(max(var, 0.0))


class TestGPConfig:
    def test_prior_bound(self):
        cfg = GPConfig(kernel=KernelSpec.from_params("se", sigma_f=1.5), beta=2.0)
        assert cfg.prior_bound == 3.0

    @pytest.mark.parametrize("field", ["beta", "gamma", "noise_std"])
    def test_nonpositive_rejected(self, field):
        with pytest.raises(InputError):
            GPConfig(kernel=KernelSpec("se"), **{field: 0.0})

    def test_gamma_above_beta(self):
        with pytest.raises(InputError, match="gamma"):
            GPConfig(kernel=KernelSpec("se"), beta=1.0, gamma=1.5)
        GPConfig(kernel=KernelSpec("se"), beta=1.0, gamma=1.0)

    def test_bad_capacity(self):
        with pytest.raises(InputError):
            GPConfig(kernel=KernelSpec("se"), max_data=0)

    def test_roundtrip(self):
        cfg = GPConfig(kernel=KernelSpec.from_params("rq", alpha=3.0), beta=2.5, max_data=7)
        assert GPConfig.from_dict(cfg.to_dict()) == cfg


class TestErrorBound:
    def test_basic(self):
        cfg = GPConfig(kernel=KernelSpec("se"), beta=2.0)
        assert error_bound(cfg, Posterior(0.0, 0.5)) == 1.0

    def test_empty_buffer_is_prior_bound(self):
        gp = make_gp()
        post = gp.predict([0.3])
        assert error_bound(gp.cfg, post) == gp.cfg.prior_bound == 2.0


class TestOnlineGP:
    def test_empty_prior(self):
        post = make_gp().predict([1.0])
        assert (post.mean, post.std) == (0.0, 1.0)

    def test_one_sample(self):
        gp = make_gp().update([0.0], 1.0)
        assert len(gp) == 1
        assert gp.predict([0.0]).mean == pytest.approx(1 / 1.01, abs=1e-12)
        assert gp.predict([0.0]).mean == pytest.approx(0.990099, abs=1e-6)

    def test_fifo_eviction(self):
        gp = make_gp(max_data=2)
        for i in range(3):
            gp.update([float(i)], float(i))
        np.testing.assert_array_equal(gp.X[:, 0], [1.0, 2.0])

    def test_interpolates_with_tiny_noise(self):
        gp = make_gp(noise=1e-6).update([0.4], -0.7)
        assert gp.predict([0.4]).mean == pytest.approx(-0.7, abs=1e-9)

    def test_non_finite_rejected(self):
        gp = make_gp()
        with pytest.raises(InputError):
            gp.update([np.nan], 0.0)
        with pytest.raises(InputError):
            gp.update([0.0], np.inf)
        with pytest.raises(InputError):
            gp.update([0.0, 1.0], 1.0)

    def test_dense_oracle_200(self):
        rng = np.random.default_rng(3)
        gp = make_gp(max_data=200, noise=0.05, dim=2, sigma_l=0.8)
        X = rng.uniform(-2, 2, size=(200, 2))
        y = np.sin(X[:, 0]) * np.cos(X[:, 1])
        for x, t in zip(X, y):
            gp.update(x, t)
        for xq in rng.uniform(-2, 2, size=(20, 2)):
            mean, std = dense_posterior(gp.spec, X, y, xq, 0.05)
            post = gp.predict(xq)
            assert abs(post.mean - mean) <= 1e-8
            assert abs(post.std - std) <= 1e-8

    def test_eviction_matches_refactorization(self):
        rng = np.random.default_rng(4)
        gp = make_gp(max_data=30, noise=0.1)
        X = rng.uniform(-3, 3, size=(100, 1))
        y = np.sin(2 * X[:, 0])
        for x, t in zip(X, y):
            gp.update(x, t)
        L_inc = gp._L.copy()
        gp._refactor()
        np.testing.assert_allclose(L_inc, gp._L, atol=1e-9)
        np.testing.assert_array_equal(gp.X, X[-30:])

    def test_fit_equals_updates(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 1))
        y = X[:, 0] ** 2
        a = make_gp(max_data=25).fit(X, y)
        b = make_gp(max_data=25)
        for x, t in zip(X, y):
            b.update(x, t)
        for xq in ([0.0], [1.2], [-0.7]):
            np.testing.assert_allclose(a.predict(xq).mean, b.predict(xq).mean, atol=1e-9)

    def test_duplicate_points_stay_stable(self):
        gp = make_gp(noise=1e-8)
        for _ in range(20):
            gp.update([0.5], 1.0)
        post = gp.predict([0.5])
        assert math.isfinite(post.mean) and post.std >= 0

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=15), st.floats(-4, 4))
    @settings(max_examples=40, deadline=None)
    def test_std_never_exceeds_prior(self, xs, xq):
        gp = make_gp(max_data=10)
        for x in xs:
            gp.update([x], math.sin(x))
        post = gp.predict([xq])
        assert 0.0 <= post.std <= 1.0


class TestRank1:
    def test_against_cholesky(self):
        rng = np.random.default_rng(6)
        A = rng.normal(size=(8, 8))
        M = A @ A.T + 8 * np.eye(8)
        v = rng.normal(size=8)
        L = chol_rank1_update(np.linalg.cholesky(M), v)
        np.testing.assert_allclose(L, np.linalg.cholesky(M + np.outer(v, v)), atol=1e-12)
