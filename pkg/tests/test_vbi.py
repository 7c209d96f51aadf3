import numpy as np
import pytest

from src.baselines import tr_als_step_oracle
from src.bench import gen_synthetic, psnr, rse, sample_mask
from src.config import FitConfig
from src.errors import EmptyObservationError, NumericalError
from src.models import init_state, prior_precision
from src.tensor import IndexSet, cyclic_order, design_rows, random_cores, tr_entries, tr_reconstruct
from src.vbi import (
    check_state,
    complete,
    component_power,
    entry_second_moments,
    expected_subchain_gram,
    fit,
    observed_rmse,
    predictive_variance,
    prune_ranks,
    remove_components,
    round_bond,
    run_sweep_iteration,
    spd_inverse,
    update_core_factor,
    update_lambda,
    update_tau,
)


def _zero_cov(state, modes=None):
    for k in (range(state.order) if modes is None else modes):
        state.cores.cov[k] = np.zeros_like(state.cores.cov[k])


def _random_cov(state, rng, scale=0.2):
    for k in range(state.order):
        extent, s, _ = state.cores.cov[k].shape
        w = rng.standard_normal((extent, s, s))
        state.cores.cov[k] = scale * np.einsum("iab,icb->iac", w, w) / s + 0.05 * np.eye(s)


def _slice_rows(state, n, i):
    pos = state.mask.bucket(n, i)
    comp = state.mask.multi[pos][:, cyclic_order(state.order, n)]
    return design_rows(state.cores.mean, comp, n), pos


def _sample_cores(state, rng, draws):
    """Joint draws from q(G): one ``(draws, R_{k-1}, I_k, R_k)`` array per core."""
    samples = []
    for k, core in enumerate(state.cores.mean.cores):
        rl, extent, rr = core.shape
        chol = np.linalg.cholesky(state.cores.cov[k])
        z = rng.standard_normal((draws, extent, rl * rr))
        vecs = state.cores.slice_vectors(k) + np.einsum("iab,dib->dia", chol, z)
        # slice vector index is p + R_{k-1} q
        samples.append(vecs.reshape(draws, extent, rr, rl).transpose(0, 3, 1, 2))
    return samples


class TestSpdInverse:
    def test_matches_inverse(self, rng):
        a = rng.standard_normal((5, 5))
        a = a @ a.T + np.eye(5)
        np.testing.assert_allclose(spd_inverse(a) @ a, np.eye(5), atol=1e-10)

    def test_singular_psd_gets_jitter(self, rng):
        v = rng.standard_normal(4)
        inv = spd_inverse(np.outer(v, v))
        assert np.isfinite(inv).all()

    def test_indefinite_raises_with_diagnostics(self):
        with pytest.raises(NumericalError) as info:
            spd_inverse(-np.eye(3), {"mode": 2})
        assert info.value.diagnostics == {"mode": 2}


class TestSubchainGram:
    def test_deterministic_cores(self, small_state):
        _zero_cov(small_state)
        for n in range(small_state.order):
            for i in range(small_state.dims[n]):
                rows, _ = _slice_rows(small_state, n, i)
                np.testing.assert_allclose(expected_subchain_gram(small_state, n, i), rows.T @ rows, atol=1e-10)

    def test_monte_carlo(self, rng):
        cores = random_cores((3, 2, 3), 2, rng)
        t = tr_reconstruct(cores)
        state = init_state(t, IndexSet.full(t.shape), 2, seed=5)
        for k in range(3):
            state.cores.cov[k] = state.cores.cov[k] * 0.3
        n, i = 1, 0
        exact = expected_subchain_gram(state, n, i)

        pos = state.mask.bucket(n, i)
        comp = state.mask.multi[pos][:, cyclic_order(3, n)]
        draws = 40000
        acc = np.zeros_like(exact)
        sample = state.cores.mean.copy()
        for _ in range(draws):
            for k in (0, 2):
                core = state.cores.mean.cores[k]
                noise = np.sqrt(0.3) * rng.standard_normal(core.shape)
                sample.cores[k] = core + noise
            rows = design_rows(sample, comp, n)
            acc += rows.T @ rows
        mc = acc / draws
        assert np.linalg.norm(mc - exact) / np.linalg.norm(exact) < 0.03

    def test_empty_slice_gives_zero(self, rng):
        t = rng.standard_normal((3, 3))
        mask = IndexSet.from_multi(t.shape, [[0, 0], [0, 1], [1, 2]])
        state = init_state(t, mask, 2)
        np.testing.assert_array_equal(expected_subchain_gram(state, 0, 2), np.zeros((4, 4)))


class TestEntryMoments:
    def test_zero_covariance(self, small_state):
        _zero_cov(small_state)
        multi = small_state.mask.multi
        x = tr_entries(small_state.cores.mean, multi)
        np.testing.assert_allclose(entry_second_moments(small_state, multi), x ** 2, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(predictive_variance(small_state), 0.0, atol=1e-9)

    def test_variance_is_non_negative(self, small_state):
        var = predictive_variance(small_state)
        assert var.shape == small_state.dims
        assert (var >= 0).all()
        assert var.max() > 0
        sub = predictive_variance(small_state, small_state.mask)
        np.testing.assert_allclose(sub, var.reshape(-1, order="F")[small_state.mask.linear])

    def test_monte_carlo(self, rng):
        t = rng.standard_normal((2, 2, 2))
        full = IndexSet.full(t.shape)
        state = init_state(t, full, 2, seed=9)
        _random_cov(state, rng)
        exact = entry_second_moments(state, full.multi).reshape(t.shape, order="F")

        acc = np.zeros(t.shape)
        draws, chunks = 100000, 4
        for _ in range(chunks):
            a, b, c = _sample_cores(state, rng, draws)
            x = np.einsum("dpiq,dqjr,drkp->dijk", a, b, c)
            acc += np.mean(x ** 2, axis=0)
        mc = acc / chunks
        assert np.max(np.abs(mc - exact) / exact) < 0.02


class TestCoreUpdate:
    def test_matches_ridge_least_squares(self, small_state):
        state = small_state
        state.tau.shape, state.tau.rate = 1.0, 1.0
        _zero_cov(state)
        n = 1
        prior = prior_precision(state, n)
        expected = tr_als_step_oracle(state.cores.mean, state.observations, state.mask, n, prior)
        update_core_factor(state, n)
        np.testing.assert_allclose(state.cores.mean.cores[n], expected, rtol=1e-10, atol=1e-12)

    def test_scalar_closed_form(self, rng):
        t = rng.standard_normal((3, 4))
        state = init_state(t, IndexSet.full(t.shape), 1, seed=3)
        v2 = rng.uniform(0.1, 0.5, 4)
        state.cores.cov[1] = v2.reshape(4, 1, 1)
        state.tau.shape, state.tau.rate = 3.0, 2.0
        state.lambdas.shape[0], state.lambdas.rate[0] = np.array([2.0]), np.array([1.0])
        state.lambdas.shape[1], state.lambdas.rate[1] = np.array([3.0]), np.array([1.0])
        g2 = state.cores.mean.cores[1][0, :, 0].copy()

        update_core_factor(state, 0)
        precision = 1.5 * np.sum(g2 ** 2 + v2) + 2.0 * 3.0
        np.testing.assert_allclose(state.cores.mean.cores[0][0, :, 0], 1.5 * (t @ g2) / precision, rtol=1e-12)
        np.testing.assert_allclose(state.cores.cov[0][:, 0, 0], 1.0 / precision, rtol=1e-12)

    def test_maximizes_variational_objective(self, rng):
        t = rng.standard_normal((2, 2))
        state = init_state(t, IndexSet.full(t.shape), 1, seed=2)
        v2 = np.array([0.3, 0.2])
        state.cores.cov[1] = v2.reshape(2, 1, 1)
        state.tau.shape, state.tau.rate = 3.0, 2.0
        state.lambdas.shape[0], state.lambdas.rate[0] = np.array([2.0]), np.array([1.0])
        state.lambdas.shape[1], state.lambdas.rate[1] = np.array([3.0]), np.array([1.0])
        g2 = state.cores.mean.cores[1][0, :, 0].copy()
        update_core_factor(state, 0)

        def objective(i, m, v):
            fit_term = -0.75 * np.sum(-2.0 * t[i] * m * g2 + (m ** 2 + v) * (g2 ** 2 + v2))
            return fit_term - 0.5 * 6.0 * (m ** 2 + v) + 0.5 * np.log(v)

        for i in range(2):
            m = state.cores.mean.cores[0][0, i, 0]
            v = state.cores.cov[0][i, 0, 0]
            best = objective(i, m, v)
            for delta in (-0.1, -0.01, 0.01, 0.1):
                assert objective(i, m + delta, v) < best
                assert objective(i, m, v * np.exp(delta)) < best

    def test_covariances_stay_spd(self, small_state):
        for n in range(small_state.order):
            update_core_factor(small_state, n)
        check_state(small_state)

    def test_threaded_matches_serial(self, small_state):
        other = small_state.copy()
        update_core_factor(small_state, 0)
        update_core_factor(other, 0, n_jobs=2)
        np.testing.assert_allclose(other.cores.mean.cores[0], small_state.cores.mean.cores[0], atol=1e-12)
        np.testing.assert_allclose(other.cores.cov[0], small_state.cores.cov[0], atol=1e-12)

    def test_unobserved_slice_falls_back_to_prior(self, rng):
        t = rng.standard_normal((3, 3))
        mask = IndexSet.from_multi(t.shape, [[0, 0], [0, 1], [1, 2], [1, 1]])
        state = init_state(t, mask, 2)
        update_core_factor(state, 0)
        np.testing.assert_array_equal(state.cores.mean.cores[0][:, 2, :], 0.0)
        np.testing.assert_allclose(state.cores.cov[0][2], np.diag(1.0 / prior_precision(state, 0)))


class TestHyperUpdates:
    def test_lambda_shape(self, small_state):
        update_lambda(small_state, 0)
        # I_0 R_{-1} + I_1 R_1 = 4*3 + 5*3
        expected = small_state.priors.c[0] + 0.5 * (12 + 15)
        np.testing.assert_allclose(small_state.lambdas.shape[0], expected)
        assert (small_state.lambdas.rate[0] > small_state.priors.d[0]).all()

    def test_lambda_rate_matches_elementwise_sum(self, small_state, rng):
        state = small_state
        _random_cov(state, rng)
        for k in range(state.order):
            state.lambdas.shape[k] = rng.uniform(0.5, 2.0, state.bonds[k])
            state.lambdas.rate[k] = np.ones(state.bonds[k])
        n = 1
        lam_prev = state.lambdas.expectation(0)
        lam_next = state.lambdas.expectation(2)
        core_n, core_next = state.cores.mean.cores[1], state.cores.mean.cores[2]
        rl, rr = core_n.shape[0], core_next.shape[0]

        expected = state.priors.d[n].copy()
        for r in range(state.bonds[n]):
            total = 0.0
            for p in range(rl):
                for i in range(core_n.shape[1]):
                    var = state.cores.cov[1][i][p + rl * r, p + rl * r]
                    total += lam_prev[p] * (core_n[p, i, r] ** 2 + var)
            for j in range(core_next.shape[1]):
                for q in range(core_next.shape[2]):
                    var = state.cores.cov[2][j][r + rr * q, r + rr * q]
                    total += lam_next[q] * (core_next[r, j, q] ** 2 + var)
            expected[r] += 0.5 * total

        update_lambda(state, n)
        np.testing.assert_allclose(state.lambdas.rate[n], expected, rtol=1e-12)

    def test_rate_factor(self, small_state):
        other = small_state.copy()
        update_lambda(small_state, 2)
        update_lambda(other, 2, rate_factor=0.25)
        d = small_state.priors.d[2]
        np.testing.assert_allclose(other.lambdas.rate[2] - d, 0.5 * (small_state.lambdas.rate[2] - d), rtol=1e-12)

    def test_tau_uses_squared_residual(self, small_state):
        _zero_cov(small_state)
        update_tau(small_state)
        residual = small_state.observed_values - tr_entries(small_state.cores.mean, small_state.mask.multi)
        assert small_state.tau.rate == pytest.approx(small_state.priors.b + 0.5 * np.sum(residual ** 2), rel=1e-9)
        assert small_state.tau.shape == pytest.approx(small_state.priors.a + 0.5 * len(small_state.mask))


class TestPruning:
    def test_removes_dead_component(self, small_state):
        state = small_state
        _zero_cov(state)
        state.cores.mean.cores[0][:, :, 1] = 0.0
        state.cores.mean.cores[1][1, :, :] = 0.0
        assert component_power(state, 0)[1] == 0.0
        prune_ranks(state, modes=[0])
        assert state.bonds == (2, 3, 3)
        state.check_consistency()

    def test_pruning_a_weak_component_barely_moves_the_reconstruction(self, small_state):
        state = small_state
        _zero_cov(state)
        state.cores.mean.cores[0][:, :, 2] *= 1e-4
        state.cores.mean.cores[1][2, :, :] *= 1e-4
        before = tr_reconstruct(state.cores.mean)
        power = component_power(state, 0)
        assert power[2] < 1e-6 * power.max()

        prune_ranks(state, modes=[0])
        assert state.bonds[0] == 2
        change = np.linalg.norm(tr_reconstruct(state.cores.mean) - before)
        assert change <= 1e-6 * np.linalg.norm(before)

    def test_remove_keeps_remaining_slices(self, small_state):
        before = small_state.cores.mean.cores[1].copy()
        cov_before = small_state.cores.cov[1].copy()
        keep = np.array([True, False, True])
        remove_components(small_state, 0, keep)
        np.testing.assert_array_equal(small_state.cores.mean.cores[1], before[keep])
        # slice vector of core 1 is indexed p + 3 q with p on bond 0
        idx = [p + 3 * q for q in range(3) for p in (0, 2)]
        np.testing.assert_array_equal(small_state.cores.cov[1], cov_before[:, idx][:, :, idx])
        small_state.check_consistency()

    def test_lambda_rule_never_below_one(self, small_state):
        small_state.lambdas.shape[2] = np.array([1.0, 1e9, 1e12])
        small_state.lambdas.rate[2] = np.ones(3)
        prune_ranks(small_state, threshold=1e-6, rule="lambda", modes=[2])
        assert small_state.bonds[2] == 1

    def test_rank_one_untouched(self, small_state):
        remove_components(small_state, 1, np.array([True, False, False]))
        prune_ranks(small_state, modes=[1])
        assert small_state.bonds[1] == 1


class TestRoundBond:
    def test_one_sided_component_is_removed(self, small_state):
        state = small_state
        state.cores.mean.cores[1][2, :, :] = 0.0
        power = component_power(state, 0)
        assert power[2] > 1e-6 * power.max()
        before = tr_reconstruct(state.cores.mean)

        round_bond(state, 0)
        assert state.bonds == (2, 3, 3)
        np.testing.assert_allclose(tr_reconstruct(state.cores.mean), before, atol=1e-10 * np.abs(before).max())
        check_state(state)

    def test_spread_direction_is_merged(self, small_state):
        state = small_state
        state.cores.mean.cores[1][2, :, :] = state.cores.mean.cores[1][0, :, :]
        before = tr_reconstruct(state.cores.mean)

        round_bond(state, 0)
        assert state.bonds[0] == 2
        assert state.lambdas.shape[0].size == 2
        np.testing.assert_allclose(tr_reconstruct(state.cores.mean), before, atol=1e-10 * np.abs(before).max())
        check_state(state)

    def test_full_rank_bond_untouched(self, small_state):
        before = [c.copy() for c in small_state.cores.mean.cores]
        round_bond(small_state, 1)
        assert small_state.bonds == (3, 3, 3)
        for a, b in zip(before, small_state.cores.mean.cores):
            np.testing.assert_array_equal(a, b)

    def test_disabled(self, small_state):
        small_state.cores.mean.cores[1][2, :, :] = 0.0
        round_bond(small_state, 0, tol=0.0)
        assert small_state.bonds == (3, 3, 3)


class TestFit:
    def test_zero_iterations_returns_initial_state(self, small_problem):
        t, mask = small_problem
        state, trace = fit(t, mask, FitConfig(r_init=2, max_iters=0))
        assert trace == []
        assert state.bonds == (2, 2, 2)
        assert state.iteration == 0

    def test_trace_and_invariants(self, small_problem):
        t, mask = small_problem
        seen = []

        def check(state, record):
            state.check_consistency()
            seen.append(record.ranks)

        state, trace = fit(t, mask, FitConfig(r_init=4, max_iters=15, seed=1), callback=check)
        assert [r.iter for r in trace] == list(range(1, len(trace) + 1))
        assert seen == [r.ranks for r in trace]
        for prev, cur in zip(seen, seen[1:]):
            assert all(c <= p for p, c in zip(prev, cur))
        assert all(1 <= r <= 4 for r in state.bonds)
        check_state(state)

    def test_does_not_collapse_to_zero(self, small_problem):
        t, mask = small_problem
        state, _ = fit(t, mask, FitConfig(r_init=3, max_iters=30, seed=3))
        x = tr_reconstruct(state.cores.mean)
        assert np.linalg.norm(x) > 0.5 * np.linalg.norm(t)
        assert rse(x, t) < 0.5

    def test_extra_sweep_is_a_fixed_point(self):
        _, noisy, _ = gen_synthetic((6, 6, 6), 2, 20.0, seed=8)
        config = FitConfig(r_init=2, max_iters=500, seed=1)
        state, trace = fit(noisy, IndexSet.full(noisy.shape), config)
        assert len(trace) < config.max_iters
        before = observed_rmse(state)
        state.iteration += 1
        run_sweep_iteration(state, config)
        assert abs(observed_rmse(state) - before) < 10 * config.tol

    def test_same_seed_same_trace(self, small_problem):
        t, mask = small_problem
        config = FitConfig(r_init=3, max_iters=5, seed=11)
        _, a = fit(t, mask, config)
        _, b = fit(t, mask, config)
        assert [r.to_dict() for r in a] == [r.to_dict() for r in b]

    def test_empty_mask(self):
        with pytest.raises(EmptyObservationError):
            fit(np.zeros((3, 3)), IndexSet((3, 3), []))

    def test_complete_keeps_observed(self, small_problem):
        t, mask = small_problem
        state, _ = fit(t, mask, FitConfig(r_init=2, max_iters=3))
        x = complete(state)
        np.testing.assert_array_equal(mask.values(x), mask.values(t))
        raw = complete(state, overwrite_observed=False)
        np.testing.assert_allclose(raw, tr_reconstruct(state.cores.mean))


def _smooth_image():
    u = np.arange(64) / 64.0
    s, c = np.sin(2 * np.pi * u), np.cos(2 * np.pi * u)
    base = 0.5 + 0.3 * np.outer(s, c)
    return np.stack([base, 0.5 + 0.3 * np.outer(c, s), 0.8 * base + 0.1], axis=2)


@pytest.mark.slow
class TestRecovery:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_noiseless_full_observation_finds_true_ranks(self, seed):
        clean, _, _ = gen_synthetic((6, 6, 6), 2, None, seed=seed)
        state, trace = fit(clean, IndexSet.full(clean.shape), FitConfig(r_init=5, max_iters=200, seed=seed))
        assert state.bonds == (2, 2, 2)
        assert observed_rmse(state) < 1e-6
        for prev, cur in zip(trace, trace[1:]):
            assert all(c <= p for p, c in zip(prev.ranks, cur.ranks))

    def test_noiseless_partial_observation(self):
        clean, _, _ = gen_synthetic((8, 8, 8), 2, None, seed=0)
        mask = sample_mask(clean.shape, 0.3, seed=1)
        state, _ = fit(clean, mask, FitConfig(r_init=5, max_iters=200, seed=2))
        assert rse(complete(state), clean) < 1e-2

    def test_rank_recovery_at_moderate_noise(self):
        clean, noisy, _ = gen_synthetic((10, 10, 10, 10), 3, 20.0, seed=3)
        mask = sample_mask(clean.shape, 0.3, seed=4)
        state, _ = fit(noisy, mask, FitConfig(max_iters=100, seed=5))
        assert abs(np.mean(state.bonds) - 3) <= 0.5
        assert rse(complete(state), clean) < 0.2

    def test_image_beats_mean_fill(self):
        from src.bench import mean_fill
        from src.data_loader import detensorize, preset_shape, tensorize

        img = _smooth_image()
        _, tensor_shape = preset_shape("small64")
        gains = []
        for seed in range(10):
            mask_img = sample_mask(img.shape, 0.7, seed=seed)
            mask = IndexSet(tensor_shape, mask_img.linear)
            state, _ = fit(tensorize(img, tensor_shape), mask, FitConfig(r_init=4, max_iters=40, seed=seed))
            recovered = detensorize(complete(state), img.shape)
            gains.append(psnr(recovered, img) - psnr(mean_fill(img, mask_img), img))
        assert np.median(gains) >= 5.0
