import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from optrerand.balance import imbalances, rank_pool
from optrerand.design_space import AssignmentPool, enumerate_balanced, mirror_close, sample_bcrd
from optrerand.errors import DegenerateDistributionError, ParameterError, PreconditionError, ValidationError
from optrerand.moments import StrategyMoments, balance_term, criterion_matrices, moments_of, projection_cache
from optrerand.tail import (
    TailSpec,
    ZSampler,
    chi2_quantile,
    draw_z,
    evaluate_tail,
    expected_mse_dm,
    expected_mse_lr,
    hbe_quantile,
    mse_dm_given_z,
    mse_lr_given_z,
    normal_quantile,
    q_prime_dm,
    se_mse_dm,
    se_mse_lr,
    smooth_series,
    tail_approx_lr,
    tail_exact_lr,
    tail_normal_lr,
)

from conftest import standardized


def _setup(seed, n=16, p=2, S=60, s=None):
    r = np.random.default_rng(seed)
    X = standardized(r.standard_normal((n, p)))
    ranked = rank_pool(X, mirror_close(sample_bcrd(n, S, seed)))
    cache = projection_cache(X)
    s = s or len(ranked)
    return X, cache, moments_of(ranked.assignments[:s], cache)


def _exact_lr_sq_error(W, cache, z):
    """Closed-form LR error per assignment: w'(I-P)z / (n - w'Pw)."""
    g = (W @ (cache.I_minus_P @ z)) / (cache.n - cache.quad(W))
    return np.mean(g**2)


class TestQuantileFunctions:
    # reference values from standard statistical tables (17 significant digits)
    @pytest.mark.parametrize("q,expect", [
        (0.95, 1.6448536269514722), (0.975, 1.959963984540054), (0.99, 2.3263478740408408),
        (0.5, 0.0), (0.9, 1.2815515655446004),
    ])
    def test_normal(self, q, expect):
        assert normal_quantile(q) == pytest.approx(expect, abs=1e-10)

    @pytest.mark.parametrize("q,dof,expect", [
        (0.95, 1, 3.841458820694124), (0.95, 10, 18.307038053275146),
        (0.99, 2, 9.210340371976182), (0.9, 5, 9.236356899781123),
    ])
    def test_chi2(self, q, dof, expect):
        assert chi2_quantile(q, dof) == pytest.approx(expect, abs=1e-10)


class TestHBE:
    @pytest.mark.parametrize("k", [1, 3, 10, 50])
    @pytest.mark.parametrize("q", [0.9, 0.95, 0.99])
    def test_equal_weights_exact(self, k, q):
        assert hbe_quantile(np.ones(k), q) == pytest.approx(chi2_quantile(q, k), rel=1e-12)

    def test_single_weight(self):
        assert hbe_quantile([2.0], 0.95) == pytest.approx(2 * chi2_quantile(0.95, 1), rel=1e-12)

    def test_mixture_vs_monte_carlo(self):
        lam = np.array([1.0, 2.0, 3.0])
        r = np.random.default_rng(123)
        draws = r.chisquare(1, size=(10**6, 3)) @ lam
        assert hbe_quantile(lam, 0.95) == pytest.approx(np.quantile(draws, 0.95), rel=0.02)

    @given(st.lists(st.floats(0.01, 100), min_size=1, max_size=30), st.floats(0.01, 1e3),
           st.sampled_from([0.5, 0.9, 0.95, 0.99]))
    def test_homogeneous(self, lam, c, q):
        lam = np.array(lam)
        assert hbe_quantile(c * lam, q) == pytest.approx(c * hbe_quantile(lam, q), rel=1e-9)

    def test_all_zero(self):
        with pytest.raises(DegenerateDistributionError):
            hbe_quantile(np.zeros(4), 0.95)

    def test_clamps_negative(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            # tiny negative mass: silent
            hbe_quantile([1.0, 2.0, -1e-9], 0.95)
        with pytest.warns(RuntimeWarning, match="clamping"):
            v = hbe_quantile([1.0, 2.0, -0.5], 0.95)
        assert v == pytest.approx(hbe_quantile([1.0, 2.0], 0.95))


class TestMSEGivenZ:
    def test_zero(self, rng):
        X, cache, m = _setup(0)
        _, R = criterion_matrices(m, cache)
        assert mse_lr_given_z(R, np.zeros(cache.n)) == 0.0

    def test_column_space_killed_by_g(self, rng):
        X, cache, m = _setup(1)
        G, _ = criterion_matrices(m, cache)
        z = X @ rng.standard_normal(X.shape[1])
        assert mse_lr_given_z(G, z) == pytest.approx(0.0, abs=1e-12)

    def test_batch_matches_loop(self, rng):
        X, cache, m = _setup(2)
        _, R = criterion_matrices(m, cache)
        Z = rng.standard_normal((5, cache.n))
        np.testing.assert_allclose(mse_lr_given_z(R, Z), [mse_lr_given_z(R, z) for z in Z], rtol=1e-12)

    def test_enumeration_oracle_small_imbalance(self):
        # calibrated threshold: see the error-vs-threshold test below
        W = enumerate_balanced(8).assignments.astype(float)
        worst = 0.0
        for seed in range(200):
            r = np.random.default_rng(seed)
            X = standardized(r.standard_normal((8, 1)))
            Ws = W[imbalances(X, W) < 0.05]
            if len(Ws) < 2:
                continue
            cache = projection_cache(X)
            _, R = criterion_matrices(moments_of(Ws, cache), cache)
            z = r.standard_normal(8)
            worst = max(worst, abs(mse_lr_given_z(R, z) / _exact_lr_sq_error(Ws, cache, z) - 1))
        assert worst < 0.05

    def test_error_shrinks_with_threshold(self):
        W = enumerate_balanced(8).assignments.astype(float)
        med = []
        for thr in (0.5, 0.2, 0.05):
            errs = []
            for seed in range(100):
                r = np.random.default_rng(seed)
                X = standardized(r.standard_normal((8, 1)))
                Ws = W[imbalances(X, W) < thr]
                if len(Ws) < 2:
                    continue
                cache = projection_cache(X)
                _, R = criterion_matrices(moments_of(Ws, cache), cache)
                z = r.standard_normal(8)
                errs.append(abs(mse_lr_given_z(R, z) / _exact_lr_sq_error(Ws, cache, z) - 1))
            med.append(np.median(errs))
        assert med[0] > med[1] > med[2]

    def test_dm_zero(self, rng):
        X, cache, m = _setup(3)
        assert mse_dm_given_z(m.Sigma_W, X, np.zeros(2), np.zeros(cache.n)) == 0.0

    def test_dm_pair(self, rng):
        X = standardized(rng.standard_normal((8, 2)))
        cache = projection_cache(X)
        w = sample_bcrd(8, 1, seed=4).assignments[0].astype(float)
        m = moments_of(np.vstack([w, -w]), cache)
        beta, z = rng.standard_normal(2), rng.standard_normal(8)
        expect = (w @ (X @ beta + z)) ** 2 / 64
        assert mse_dm_given_z(m.Sigma_W, X, beta, z) == pytest.approx(expect, rel=1e-12)

    def test_dm_enumeration(self, rng):
        X = standardized(rng.standard_normal((8, 1)))
        W = enumerate_balanced(8).assignments.astype(float)
        m = moments_of(W, projection_cache(X))
        beta, z = rng.standard_normal(1), rng.standard_normal(8)
        direct = np.mean((W @ (X @ beta + z) / 8) ** 2)
        assert mse_dm_given_z(m.Sigma_W, X, beta, z) == pytest.approx(direct, abs=1e-10)


class TestExpectedMSE:
    def test_lr_orthogonal_pair(self):
        X = np.array([[1.0], [1.0], [-1.0], [-1.0]])
        w = np.array([1.0, -1.0, 1.0, -1.0])
        cache = projection_cache(X)
        m = moments_of(np.vstack([w, -w]), cache)
        assert expected_mse_lr(m, cache, 2.5) == pytest.approx(2.5 / 4, rel=1e-14)

    def test_lr_trace_identity(self):
        X, cache, m = _setup(5)
        _, R = criterion_matrices(m, cache)
        n = cache.n
        assert expected_mse_lr(m, cache, 1.7) == pytest.approx(1.7 / n**2 * np.trace(R), rel=1e-10)

    def test_lr_monte_carlo(self):
        X, cache, m = _setup(6)
        _, R = criterion_matrices(m, cache)
        Z = 1.3 * np.random.default_rng(0).standard_normal((10**4, cache.n))
        v = mse_lr_given_z(R, Z)
        se = v.std(ddof=1) / np.sqrt(v.size)
        assert abs(v.mean() - expected_mse_lr(m, cache, 1.3**2)) < 3 * se

    def test_dm_zero_signal(self):
        X, cache, m = _setup(7)
        assert expected_mse_dm(m, X, np.zeros(2), 2.0) == pytest.approx(2.0 / cache.n)

    def test_dm_monte_carlo(self, rng):
        X, cache, m = _setup(8)
        beta = rng.standard_normal(2)
        Z = np.random.default_rng(1).standard_normal((10**4, cache.n))
        v = mse_dm_given_z(m.Sigma_W, X, beta, Z)
        se = v.std(ddof=1) / np.sqrt(v.size)
        assert abs(v.mean() - expected_mse_dm(m, X, beta, 1.0)) < 3 * se

    def test_dm_bcrd_closed_form(self, rng):
        n = 6
        X = standardized(rng.standard_normal((n, 1)))
        m = moments_of(enumerate_balanced(n).assignments, projection_cache(X))
        beta = rng.standard_normal(1)
        v = X @ beta
        # Sigma_W = n/(n-1) I - 1/(n-1) 11'
        quad = n / (n - 1) * (v @ v) - v.sum() ** 2 / (n - 1)
        assert expected_mse_dm(m, X, beta, 0.8) == pytest.approx(0.8 / n + quad / n**2, rel=1e-12)


class TestStandardErrors:
    def test_dm_zero_signal(self):
        X, cache, m = _setup(9)
        n = cache.n
        expect = 1.0 / n**2 * np.sqrt(2) * np.linalg.norm(m.Sigma_W, "fro")
        assert se_mse_dm(m, X, np.zeros(2), 1.0) == pytest.approx(expect, rel=1e-12)

    def test_dm_monte_carlo(self, rng):
        X, cache, m = _setup(10, n=10, S=40)
        beta = rng.standard_normal(2)
        Z = np.random.default_rng(2).standard_normal((10**5, cache.n))
        sd = mse_dm_given_z(m.Sigma_W, X, beta, Z).std(ddof=1)
        assert se_mse_dm(m, X, beta, 1.0) == pytest.approx(sd, rel=0.05)

    def test_dm_kurtosis_increases(self, rng):
        X, cache, m = _setup(11)
        beta = rng.standard_normal(2)
        assert se_mse_dm(m, X, beta, 1.0, kappa_z=3.0) > se_mse_dm(m, X, beta, 1.0)

    def test_dm_requires_forced_balance(self, rng):
        X = rng.standard_normal((4, 1))
        W = np.array([[1.0, 1.0, 1.0, -1.0]])
        m = StrategyMoments(W.T @ W, np.zeros((4, 4)), 1)
        with pytest.raises(PreconditionError):
            se_mse_dm(m, X, [1.0], 1.0)

    def test_lr_printed_expression(self):
        X, cache, m = _setup(12)
        n = cache.n
        I = np.eye(n)
        P = X @ np.linalg.solve(X.T @ X, X.T)
        G = (I - P) @ m.Sigma_W @ (I - P)
        R = G + 2 / n * m.D
        A = (I - P) @ m.Sigma_W
        for kappa in (0.0, 3.0):
            inner = (2 * np.trace(A @ A.T) + 8 / n * np.trace(G @ m.D)
                     + 8 / n**2 * np.trace(m.D @ m.D) + kappa * np.sum(np.diag(R) ** 2))
            expect = 1.0 / n**2 * np.sqrt(inner)
            assert se_mse_lr(m, cache, 1.0, kappa) == pytest.approx(expect, rel=1e-10)

    def test_lr_monte_carlo(self):
        X, cache, m = _setup(13, n=12, S=50)
        _, R = criterion_matrices(m, cache)
        Z = np.random.default_rng(3).standard_normal((10**5, cache.n))
        sd = mse_lr_given_z(R, Z).std(ddof=1)
        assert se_mse_lr(m, cache, 1.0) == pytest.approx(sd, rel=0.05)

    def test_kurtosis_term(self):
        X, cache, m = _setup(14)
        assert se_mse_lr(m, cache, 1.0, 3.0) >= se_mse_lr(m, cache, 1.0, 0.0)


class TestTailStrategies:
    def test_normal_monotone_in_q(self):
        X, cache, m = _setup(15)
        vals = [tail_normal_lr(m, cache, q) for q in (0.5, 0.9, 0.95, 0.99)]
        assert vals == sorted(vals)

    def test_normal_vs_monte_carlo(self):
        X, cache, m = _setup(16)
        _, R = criterion_matrices(m, cache)
        Z = np.random.default_rng(4).standard_normal((10**5, cache.n))
        emp = np.quantile(np.einsum("ij,ij->i", Z @ R, Z), 0.95)
        assert tail_normal_lr(m, cache, 0.95) == pytest.approx(emp, rel=0.03)

    def test_order_invariance(self, rng):
        X = standardized(rng.standard_normal((10, 2)))
        cache = projection_cache(X)
        w = sample_bcrd(10, 1, seed=0).assignments[0]
        a = tail_normal_lr(moments_of(np.vstack([w, -w]), cache), cache, 0.95)
        b = tail_normal_lr(moments_of(np.vstack([-w, w]), cache), cache, 0.95)
        assert a == b

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_gaussian_agrees_with_normal(self, seed):
        n = int(np.random.default_rng(seed).integers(10, 26)) * 2
        X, cache, m = _setup(seed, n=n, p=3, S=200)
        ex = tail_exact_lr(m, cache, 0.95, ZSampler(), n_z=10**5, seed=seed)
        assert ex == pytest.approx(tail_normal_lr(m, cache, 0.95), rel=0.03)

    def test_exact_constant_sampler(self, rng):
        X, cache, m = _setup(17)
        _, R = criterion_matrices(m, cache)
        z0 = rng.standard_normal(cache.n)
        sampler = ZSampler("constant", table=z0)
        for q in (0.1, 0.5, 0.95):
            assert tail_exact_lr(m, cache, q, sampler, n_z=100) == pytest.approx(z0 @ R @ z0, rel=1e-12)

    def test_exact_deterministic(self):
        X, cache, m = _setup(18)
        a = tail_exact_lr(m, cache, 0.95, ZSampler("laplace"), n_z=5000, seed=9)
        b = tail_exact_lr(m, cache, 0.95, ZSampler("laplace"), n_z=5000, seed=9)
        assert a == b

    def test_draws_independent_of_workers(self):
        a = draw_z(ZSampler("student_t", dof=3), 20, 9000, seed=5, workers=1)
        b = draw_z(ZSampler("student_t", dof=3), 20, 9000, seed=5, workers=4)
        assert a.tobytes() == b.tobytes()

    def test_approx_constant(self):
        assert normal_quantile(0.95) == pytest.approx(1.645, abs=5e-4)

    def test_approx_kurtosis_order(self):
        X, cache, m = _setup(19)
        assert tail_approx_lr(m, cache, 0.95, 3.0) >= tail_approx_lr(m, cache, 0.95, 0.0)

    def test_approx_expression(self):
        X, cache, m = _setup(20)
        n = cache.n
        I = np.eye(n)
        U, _, _ = np.linalg.svd(X, full_matrices=False)
        P = U @ U.T
        G = (I - P) @ m.Sigma_W @ (I - P)
        R = G + 2 / n * m.D
        Xp = X @ np.linalg.inv(np.real(np.linalg.cholesky(X.T @ X)).T)  # orthonormal columns
        bal = np.trace(Xp.T @ m.Sigma_W @ Xp)
        A = (I - P) @ m.Sigma_W
        for kappa in (0.0, 1.0, 3.0):
            inner = (2 * np.sum(A * A) + 8 / n * np.trace(G @ m.D) + 8 / n**2 * np.trace(m.D @ m.D)
                     + kappa * np.sum(np.diag(R) ** 2))
            expect = bal + 1.6448536269514722 * np.sqrt(inner)
            assert tail_approx_lr(m, cache, 0.95, kappa) == pytest.approx(expect, rel=1e-10)

    def test_dm_zero_signal(self):
        X, cache, m = _setup(21)
        n = cache.n
        c = normal_quantile(0.9)
        expect = c * 2.0 * np.sqrt(n * 1.5 + 2 * np.sum(m.Sigma_W**2))
        assert q_prime_dm(m, X, np.zeros(2), 2.0, 0.9, 1.5) == pytest.approx(expect, rel=1e-12)

    def test_dm_recombination(self, rng):
        X, cache, m = _setup(22)
        n = cache.n
        beta, s2, q, k = rng.standard_normal(2), 1.7, 0.95, 0.5
        combined = n**2 * (expected_mse_dm(m, X, beta, s2) + normal_quantile(q) * se_mse_dm(m, X, beta, s2, k))
        assert combined - s2 * n == pytest.approx(q_prime_dm(m, X, beta, s2, q, k), rel=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_dominated_pair_ranked_alike(self, seed):
        # Sigma_W + 0.5 Sigma_W is a PSD increment in both BAL and RAND directions
        X, cache, m = _setup(seed + 30)
        big = m.scaled(1.5)
        specs = [TailSpec(strategy="normal"), TailSpec(strategy="approx", kappa=3.0),
                 TailSpec(strategy="exact", n_z=2000, seed=seed)]
        for spec in specs:
            assert evaluate_tail(m, cache, spec) < evaluate_tail(big, cache, spec)


class TestSamplers:
    def test_parse(self):
        assert ZSampler.parse("gaussian").family == "gaussian"
        assert ZSampler.parse("laplace").kurtosis == 3.0
        t = ZSampler.parse("t:5")
        assert t.family == "student_t" and t.dof == 5.0 and t.label == "t:5"
        with pytest.raises(ParameterError):
            ZSampler.parse("cauchy")
        with pytest.raises(ParameterError):
            ZSampler.parse("t:x")

    @pytest.mark.parametrize("text", ["gaussian", "laplace", "t:6"])
    def test_unit_variance(self, text):
        z = ZSampler.parse(text).sample(np.random.default_rng(0), 200, 1000)
        assert z.var() == pytest.approx(1.0, rel=0.03)

    def test_tailspec_validation(self):
        with pytest.raises(ParameterError):
            TailSpec(q=1.0)
        with pytest.raises(ParameterError):
            TailSpec(strategy="bootstrap")
        with pytest.raises(ParameterError):
            TailSpec(strategy="exact", n_z=10)
        with pytest.raises(ParameterError):
            TailSpec(kappa=-3)


class TestSmoothing:
    def test_constant(self):
        a = np.linspace(0, 1, 20)
        np.testing.assert_array_equal(smooth_series(a, np.full(20, 3.25)), 3.25)

    def test_linear(self):
        a = np.sort(np.random.default_rng(0).uniform(0, 5, 30))
        Q = 2.0 - 0.7 * a
        np.testing.assert_allclose(smooth_series(a, Q), Q, atol=1e-8)

    def test_noisy_quadratic(self):
        r = np.random.default_rng(1)
        a = np.linspace(0, 1, 60)
        truth = (a - 0.4) ** 2
        noise = 0.02 * r.standard_normal(60)
        out = smooth_series(a, truth + noise)
        assert np.var(out - truth) < np.var(noise)

    def test_interpolating_and_errors(self):
        a = np.linspace(0, 1, 6)
        Q = np.arange(6.0)
        np.testing.assert_array_equal(smooth_series(a, Q, lam=0), Q)
        with pytest.raises(ValidationError):
            smooth_series(a[::-1], Q)
        with pytest.raises(ValidationError):
            smooth_series(a[:3], Q[:3])

    def test_tied_abscissae(self):
        a = np.array([0.0, 0.0, 0.1, 0.2, 0.2, 0.3, 0.5, 0.8])
        Q = np.array([5.0, 4.8, 4.0, 3.5, 3.6, 3.0, 3.2, 4.0])
        out = smooth_series(a, Q)
        assert out.shape == Q.shape and np.all(np.isfinite(out))


def test_pool_with_pair_only_bal_term_zero():
    X = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    w = np.array([1, -1, 1, -1])
    cache = projection_cache(X)
    m = moments_of(AssignmentPool(np.vstack([w, -w]), n=4).assignments, cache)
    assert balance_term(m, cache) == pytest.approx(0.0, abs=1e-15)
