import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synfuse.errors import ConfigError, InsufficientSamplesError, NumericError, ShapeError
from synfuse.estimators import (
    DvConfig,
    DvCritic,
    GaussianKernel,
    PairedSamples,
    deep_kernel,
    derangement,
    dv_bound,
    dv_train_step,
    dv_value,
    estimate_mi_dv,
    gaussian_kernel,
    logmeanexp,
    make_deep_kernel,
    median_heuristic,
    mmd2_unbiased,
    mmd_dependence,
    permutation_null,
    permutation_pvalue,
    pvalue_from_null,
    shuffle_product_marginals,
)
from synfuse.nn import FeedforwardNet, Layer, SeededRng


def mmd2_loop(a, b, sigma):
    """Double-loop oracle of the unbiased squared MMD."""

    def k(u, v):
        return math.exp(-sum((p - q) ** 2 for p, q in zip(u, v)) / (2 * sigma * sigma))

    n, m = len(a), len(b)
    xx = sum(k(a[i], a[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    yy = sum(k(b[i], b[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(a[i], b[j]) for i in range(n) for j in range(m)) / (n * m)
    return xx + yy - 2 * xy


def constant_critic(d_x, d_y, c):
    critic = DvCritic(d_x, d_y, SeededRng(0), hidden=(3,))
    critic.net = FeedforwardNet([Layer(np.zeros((1, d_x + d_y)), [c])])
    return critic


def gaussian_pair(n, rho, seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=n)
    return x, rho * x + math.sqrt(1 - rho * rho) * g.normal(size=n)


class TestShuffle:
    def test_minimum_rows(self):
        with pytest.raises(InsufficientSamplesError):
            PairedSamples(np.zeros((2, 1)), np.zeros((2, 1)))

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(4, 40), seed=st.integers(0, 10_000))
    def test_derangement_and_multiset(self, n, seed):
        g = np.random.default_rng(seed)
        s = PairedSamples(g.normal(size=(n, 2)), g.normal(size=(n, 3)))
        out = shuffle_product_marginals(s, SeededRng(seed))
        assert np.array_equal(out.x, s.x)
        assert Counter(map(tuple, out.y)) == Counter(map(tuple, s.y))
        assert not np.any(np.all(out.y == s.y, axis=1))

    def test_reproducible(self):
        assert np.array_equal(derangement(30, SeededRng(9)), derangement(30, SeededRng(9)))


class TestDvBound:
    def test_constant_witness(self):
        s = PairedSamples(np.random.default_rng(0).normal(size=(10, 1)), np.ones((10, 1)))
        for c in (0.0, 3.7, -12.0):
            assert dv_bound(constant_critic(1, 1, c), s, s) == pytest.approx(0.0, abs=1e-12)

    def test_shift_invariance(self):
        g = np.random.default_rng(1)
        critic = DvCritic(2, 1, SeededRng(1), hidden=(8,))
        j = PairedSamples(g.normal(size=(20, 2)), g.normal(size=(20, 1)))
        p = shuffle_product_marginals(j, SeededRng(2))
        before = dv_bound(critic, j, p)
        params = critic.net.params()
        params[-1] = params[-1] + 5.0
        critic.net.set_params(params)
        assert dv_bound(critic, j, p) == pytest.approx(before, abs=1e-10)

    def test_discrete_optimal_witness_recovers_mi(self):
        pxy = np.array([[0.4, 0.1], [0.1, 0.4]])
        px, py = pxy.sum(1), pxy.sum(0)
        exact = sum(pxy[i, j] * math.log(pxy[i, j] / (px[i] * py[j])) for i in range(2) for j in range(2))
        t = np.log(pxy / np.outer(px, py))
        joint = np.concatenate([np.full(int(round(100 * pxy[i, j])), t[i, j]) for i in range(2) for j in range(2)])
        prod = np.concatenate([np.full(int(round(100 * px[i] * py[j])), t[i, j]) for i in range(2) for j in range(2)])
        assert dv_value(joint, prod) == pytest.approx(exact, abs=1e-12)

    def test_non_finite_raises(self):
        with pytest.raises(NumericError):
            dv_value(np.array([0.0, np.nan]), np.zeros(2))

    def test_logmeanexp_stable(self):
        assert logmeanexp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0)


class TestDvTrainStep:
    def _data(self, n=256, rho=0.8, seed=0):
        x, y = gaussian_pair(n, rho, seed)
        j = PairedSamples(x, y)
        return j, shuffle_product_marginals(j, SeededRng(seed))

    def test_zero_lr_is_frozen(self):
        j, p = self._data()
        critic = DvCritic(1, 1, SeededRng(0), lr=0.0)
        before = critic.net.get_flat()
        expected = dv_bound(critic, j, p)
        assert dv_train_step(critic, j, p) == expected
        assert np.array_equal(critic.net.get_flat(), before)

    def test_ema_starts_at_batch_denominator(self):
        j, p = self._data()
        critic = DvCritic(1, 1, SeededRng(0))
        t = critic.scores(p)
        dv_train_step(critic, j, p)
        assert critic.log_ema == logmeanexp(t)
        assert critic.ema_denominator > 0

    def test_bound_trends_upward(self):
        x, y = gaussian_pair(4000, 0.8, 3)
        rng = SeededRng(3)
        critic = DvCritic(1, 1, rng.split("c"), lr=1e-3)
        values = []
        for step in range(500):
            idx = rng.split(f"b{step}").generator.choice(4000, 256, replace=False)
            j = PairedSamples(x[idx], y[idx])
            values.append(dv_train_step(critic, j, shuffle_product_marginals(j, rng.split(f"s{step}"))))
        running = np.maximum.accumulate(values)
        assert np.all(np.diff(running) >= 0)
        assert np.mean(values[-100:]) > np.mean(values[:50]) + 0.2

    def test_width_mismatch(self):
        j, p = self._data()
        with pytest.raises(ShapeError):
            dv_train_step(DvCritic(2, 1, SeededRng(0)), j, p)

    def test_bad_ema_rate(self):
        with pytest.raises(ConfigError):
            DvCritic(1, 1, SeededRng(0), ema_rate=1.0)


class TestEstimateMiDv:
    def test_too_few_steps(self):
        x, y = gaussian_pair(200, 0.5, 0)
        with pytest.raises(ConfigError):
            estimate_mi_dv(x, y, DvConfig(steps=99))

    def test_too_few_rows(self):
        x, y = gaussian_pair(63, 0.5, 0)
        with pytest.raises(InsufficientSamplesError):
            estimate_mi_dv(x, y)

    def test_deterministic(self):
        x, y = gaussian_pair(300, 0.6, 1)
        cfg = DvConfig(steps=120, batch=64, seed=4)
        assert estimate_mi_dv(x, y, cfg).value == estimate_mi_dv(x, y, cfg).value

    def test_degenerate_identity_exceeds_one_nat(self):
        x, _ = gaussian_pair(10000, 0.0, 2)
        assert estimate_mi_dv(x, x.copy(), DvConfig(seed=0)).value > 1.0


class TestKernels:
    def test_gaussian_values(self):
        a = np.array([0.3, -1.0])
        assert gaussian_kernel(a, a, 0.7) == 1.0
        sigma = 1.3
        b = a + np.array([sigma, sigma])  # squared distance 2 sigma^2
        assert gaussian_kernel(a, b, sigma) == pytest.approx(math.exp(-1.0), abs=1e-15)

    def test_gaussian_symmetric(self):
        g = np.random.default_rng(0)
        for _ in range(10):
            a, b = g.normal(size=3), g.normal(size=3)
            assert gaussian_kernel(a, b, 0.9) == gaussian_kernel(b, a, 0.9)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_gaussian_bad_sigma(self, sigma):
        with pytest.raises(ConfigError):
            gaussian_kernel([0.0], [1.0], sigma)
        with pytest.raises(ConfigError):
            GaussianKernel(sigma)

    def test_deep_identity_and_floor(self):
        g = np.random.default_rng(1)
        k = make_deep_kernel(3, SeededRng(0), sigma_raw=1.5, eps_floor=0.2)
        a, b = g.normal(size=3), g.normal(size=3)
        assert deep_kernel(k, a, a) == pytest.approx(1.0, abs=1e-15)
        assert deep_kernel(k, a, b) >= 0.2 * gaussian_kernel(a, b, 1.5) > 0

    def test_deep_floor_one_collapses(self):
        g = np.random.default_rng(2)
        k = make_deep_kernel(2, SeededRng(1), sigma_raw=0.8, eps_floor=1.0)
        a, b = g.normal(size=2), g.normal(size=2)
        assert deep_kernel(k, a, b) == pytest.approx(gaussian_kernel(a, b, 0.8), abs=1e-15)

    def test_deep_gram_psd(self):
        rows = np.random.default_rng(3).normal(size=(8, 4))
        k = make_deep_kernel(4, SeededRng(2), sigma_raw=median_heuristic(rows))
        assert np.min(np.linalg.eigvalsh(k.gram(rows, rows))) >= -1e-10

    def test_deep_width_mismatch(self):
        k = make_deep_kernel(3, SeededRng(0), 1.0)
        with pytest.raises(ShapeError):
            k.gram(np.zeros((2, 2)), np.zeros((2, 2)))


class TestMmd:
    def test_hand_example(self):
        v = mmd2_unbiased(np.zeros((2, 1)), np.ones((2, 1)), GaussianKernel(1.0))
        assert v == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-15)

    def test_double_loop_oracle(self):
        g = np.random.default_rng(4)
        a, b = g.normal(size=(10, 3)), g.normal(size=(10, 3))
        assert abs(mmd2_unbiased(a, b, GaussianKernel(1.1)) - mmd2_loop(a.tolist(), b.tolist(), 1.1)) < 1e-12

    def test_row_permutation_invariance(self):
        g = np.random.default_rng(5)
        a, b = g.normal(size=(9, 2)), g.normal(size=(7, 2))
        k = GaussianKernel(0.9)
        assert mmd2_unbiased(a, b, k) == pytest.approx(mmd2_unbiased(a, b[g.permutation(7)], k), abs=1e-14)

    def test_too_few_rows(self):
        with pytest.raises(InsufficientSamplesError):
            mmd2_unbiased(np.zeros((1, 1)), np.zeros((3, 1)), GaussianKernel(1.0))

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            mmd2_unbiased(np.zeros((3, 1)), np.zeros((3, 2)), GaussianKernel(1.0))

    def test_split_halves_concentrate(self):
        # degenerate U-statistic: Var = 2 E[h^2] / (m (m - 1)) with |h| <= 2
        m = 100
        bound = math.sqrt(8.0 / (m * (m - 1)))
        for seed in range(20):
            rows = np.random.default_rng(seed).normal(size=(2 * m, 2))
            perm = np.random.default_rng(100 + seed).permutation(2 * m)
            v = mmd2_unbiased(rows[perm[:m]], rows[perm[m:]], GaussianKernel(median_heuristic(rows)))
            assert abs(v) < 3 * bound

    def test_dependence_reproducible(self):
        x, y = gaussian_pair(50, 0.5, 0)
        s = PairedSamples(x, y)
        a = mmd_dependence(s, None, SeededRng(3), 1)
        b = mmd_dependence(s, None, SeededRng(3), 1)
        assert a.value == b.value and a.measure == "MMD"

    def test_perfect_dependence_far_above_null(self):
        x, _ = gaussian_pair(2000, 0.0, 6)
        s = PairedSamples(x, x.copy())
        observed, nulls = permutation_null(s, None, SeededRng(1), n_perm=20, n_shuffles=1)
        assert observed > 10 * np.std(nulls, ddof=1)

    def test_sanity_lower_bound(self):
        x, y = gaussian_pair(40, 0.0, 7)
        assert mmd_dependence(PairedSamples(x, y), None, SeededRng(0)).value > -0.5


class TestMedianHeuristic:
    def test_single_pair(self):
        assert median_heuristic(np.array([[0.0], [2.0]])) == 2.0

    def test_identical_rows(self):
        assert median_heuristic(np.ones((6, 3))) == 1.0

    def test_mean_fallback(self):
        rows = np.array([[0.0]] * 4 + [[1.0]])
        assert median_heuristic(rows) == pytest.approx(0.4)

    def test_cap_not_binding(self):
        rows = np.random.default_rng(0).normal(size=(500, 2))
        assert median_heuristic(rows, max_rows=1000) == median_heuristic(rows, max_rows=500)

    def test_cap_binding_is_deterministic(self):
        rows = np.random.default_rng(1).normal(size=(1500, 2))
        assert median_heuristic(rows) == median_heuristic(rows.copy())


class TestPermutationPvalue:
    def test_counting_rule(self):
        assert pvalue_from_null(10.0, np.zeros(19)) == pytest.approx(1 / 20)
        assert pvalue_from_null(-1.0, np.zeros(19)) == 1.0

    def test_minimum_permutations(self):
        x, y = gaussian_pair(20, 0.0, 0)
        with pytest.raises(ConfigError):
            permutation_pvalue(PairedSamples(x, y), n_perm=18)

    def test_calibrated_under_independence(self):
        ps = []
        for seed in range(40):
            x, y = gaussian_pair(60, 0.0, 1000 + seed)
            ps.append(permutation_pvalue(PairedSamples(x, y), None, SeededRng(seed), n_perm=99, n_shuffles=1))
        ps = np.array(ps)
        assert np.all((ps > 0) & (ps <= 1))
        assert np.mean(ps > 0.01) >= 0.95
