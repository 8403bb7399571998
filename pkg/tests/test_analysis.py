import numpy as np
import pytest
from conftest import desk_stack

from mlppo.analysis import (
    AnalysisReport,
    fit_alpha,
    generate_analysis_samples,
    level_statistics,
    mc_cost,
    mlmc_cost,
    optimal_allocation,
    raw_allocation,
    run_analysis,
    telescoping_pairs,
    weak_convergence_check,
    write_analysis_report,
)
from mlppo.errors import ConfigError
from mlppo.policy import MlpParams, param_vars
from mlppo.ppo import compute_batch_losses, loss_mc, loss_mlmc


def make_policy(stack, seed=0):
    env = stack.target_env
    return MlpParams.init(env.obs_dim, env.n_wells, (8,), np.random.default_rng(seed))


class TestAlphaFit:
    def test_exact_geometric_decay(self):
        assert fit_alpha(np.array([0.8, 0.4, 0.2])) == pytest.approx(1.0)

    def test_single_gap_slope(self):
        assert fit_alpha(np.array([0.6, 0.15])) == pytest.approx(2.0)

    def test_constant_means_warn_and_fit_zero(self):
        with pytest.warns(UserWarning):
            alpha = fit_alpha(np.array([0.3, 0.3, 0.3]))
        assert alpha == pytest.approx(0.0)

    def test_zero_level_excluded_with_warning(self):
        with pytest.warns(UserWarning):
            alpha = fit_alpha(np.array([0.8, 0.0, 0.2]))
        assert alpha == pytest.approx(1.0)  # fit over levels 1 and 3

    def test_sign_insensitive(self):
        assert fit_alpha(np.array([-0.8, 0.4, -0.2])) == pytest.approx(1.0)


class TestAllocationFormulas:
    def test_hand_computed_instance(self):
        v = np.array([4.0, 1.0])
        c = np.array([1.0, 4.0])
        m = optimal_allocation(v, c, 1.0)
        np.testing.assert_array_equal(m, [16, 4])
        assert mlmc_cost(v, c, 1.0) == pytest.approx(32.0)

    def test_doubling_epsilon_quarters_raw_counts(self):
        v = np.array([3.0, 0.5])
        c = np.array([0.2, 1.0])
        r1 = raw_allocation(v, c, 0.05)
        r2 = raw_allocation(v, c, 0.1)
        np.testing.assert_allclose(r2, r1 / 4.0)

    def test_single_level_reduces_to_mc_form(self):
        v, c, eps = np.array([2.5]), np.array([1.7]), 0.3
        raw = raw_allocation(v, c, eps)
        assert raw[0] == pytest.approx(2.0 * eps**-2 * v[0])
        assert mlmc_cost(v, c, eps) == pytest.approx(2.0 * eps**-2 * v[0] * c[0])

    def test_cost_identity_pre_ceiling_random_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 6))
            v = rng.uniform(0.0, 10.0, n)
            c = rng.uniform(0.1, 10.0, n)
            eps = float(rng.uniform(0.01, 1.0))
            lhs = (raw_allocation(v, c, eps) * c).sum()
            assert lhs == pytest.approx(mlmc_cost(v, c, eps), rel=1e-12)

    def test_all_zero_variances_allocate_one_with_warning(self):
        with pytest.warns(UserWarning):
            m = optimal_allocation(np.zeros(3), np.ones(3), 0.1)
        np.testing.assert_array_equal(m, [1, 1, 1])

    def test_mc_cost_hand_case_and_linearity(self):
        m, c_total = mc_cost(1.0, 1.0, 1.0)
        assert (m, c_total) == (2, 2.0)
        m2, c2 = mc_cost(1.0, 5.0, 1.0)
        assert m2 == m and c2 == pytest.approx(5.0 * c_total / 1.0)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ConfigError):
            optimal_allocation(np.array([-1.0]), np.array([1.0]), 1.0)
        with pytest.raises(ConfigError):
            mc_cost(1.0, 0.0, 1.0)


class TestWeakConvergence:
    def test_geometric_decay_case(self):
        means = np.array([0.8, 0.4, 0.2])
        w = weak_convergence_check(means, 1.0, epsilon=0.2 * np.sqrt(2) + 1e-12)
        assert w.lhs == pytest.approx(0.2)
        assert w.passed
        w2 = weak_convergence_check(means, 1.0, epsilon=0.2 * np.sqrt(2) - 1e-3)
        assert not w2.passed

    def test_zero_bias_signal_passes_any_epsilon(self):
        w = weak_convergence_check(np.zeros(3), 1.0, epsilon=1e-9)
        assert w.passed and w.lhs == 0.0

    def test_threshold_scales_linearly(self):
        means = np.array([0.8, 0.4, 0.2]) * 10.0
        w = weak_convergence_check(means, 1.0, epsilon=1.0)
        assert w.lhs == pytest.approx(2.0)

    def test_nonpositive_alpha_fails_with_note(self):
        w = weak_convergence_check(np.array([0.1, 0.1]), 0.0, epsilon=1.0)
        assert not w.passed and "alpha" in w.note


class TestSampleGeneration:
    def test_stream_shapes_and_target_identity(self):
        stack = desk_stack((8, 16), n_perms=2)
        params = make_policy(stack)
        samples = generate_analysis_samples(
            stack, params, 40, np.random.default_rng(0)
        )
        assert len(samples.streams) == 2
        assert samples.streams[1].n_rows == 40
        np.testing.assert_array_equal(samples.y_values[0], samples.j_values[0])
        np.testing.assert_array_equal(
            samples.y_values[1], samples.j_values[1] - samples.j_values[0]
        )

    def test_difference_variance_below_raw_variance(self):
        stack = desk_stack((8, 16), n_perms=2)
        params = make_policy(stack)
        samples = generate_analysis_samples(
            stack, params, 300, np.random.default_rng(1)
        )
        stats = level_statistics(samples, stack.pair_costs())
        assert stats[1].var_y < stats[1].var_j

    def test_telescoping_identity_on_synchronized_data(self):
        stack = desk_stack((8, 16, 32), n_perms=2)
        params = make_policy(stack)
        samples = generate_analysis_samples(
            stack, params, 60, np.random.default_rng(2)
        )
        pairs = telescoping_pairs(samples)
        pvars = param_vars(params)
        losses = [
            (
                compute_batch_losses(pvars, main, 0.1, 0.5, 0.01),
                compute_batch_losses(pvars, comp, 0.1, 0.5, 0.01) if comp is not None else None,
            )
            for main, comp in pairs
        ]
        total_ml = loss_mlmc(losses).value
        total_mc = loss_mc(compute_batch_losses(pvars, samples.streams[-1], 0.1, 0.5, 0.01)).value
        assert abs(total_ml - total_mc) <= 1e-10 * max(1.0, abs(total_mc))

    def test_deterministic_given_seed(self):
        stack = desk_stack((8, 16), n_perms=2)
        params = make_policy(stack)
        a = generate_analysis_samples(stack, params, 30, np.random.default_rng(7))
        b = generate_analysis_samples(stack, params, 30, np.random.default_rng(7))
        np.testing.assert_array_equal(a.j_values[1], b.j_values[1])


class TestRunAnalysis:
    def test_single_level_degenerates_to_mc(self):
        stack = desk_stack((8,), n_perms=2)
        params = make_policy(stack)
        report = run_analysis(stack, params, seed=5, n_samples=120, epsilons=(0.5,))
        e = report.per_epsilon[0]
        assert report.alpha is None and e.weak is None
        assert e.m_levels[0] == e.m_mc
        assert e.cost_mlmc == pytest.approx(e.cost_mc, rel=0.51)  # ceil difference only
        assert len(report.stats) == 1

    def test_report_deterministic_and_written(self, tmp_path):
        stack = desk_stack((8, 16), n_perms=2)
        params = make_policy(stack)
        r1 = run_analysis(stack, params, seed=9, n_samples=100, epsilons=(0.3, 0.1))
        r2 = run_analysis(stack.clone_envs(), params, seed=9, n_samples=100, epsilons=(0.3, 0.1))
        assert r1.per_epsilon[0].y_estimate == r2.per_epsilon[0].y_estimate
        assert r1.per_epsilon[1].cost_mlmc == r2.per_epsilon[1].cost_mlmc
        paths = write_analysis_report(r1, tmp_path, tag="it0")
        assert len(paths) == 3
        text = (tmp_path / "level_stats_it0.csv").read_text()
        assert text.startswith("# allocation")
        assert len(text.splitlines()) == 4

    def test_measured_or_supplied_costs_used(self):
        stack = desk_stack((8, 16), n_perms=1)
        params = make_policy(stack)
        report = run_analysis(
            stack, params, seed=3, n_samples=60, epsilons=(0.5,), costs=[0.24, 1.0]
        )
        assert report.stats[0].cost == pytest.approx(0.24)
        assert report.stats[1].cost == pytest.approx(1.24)
