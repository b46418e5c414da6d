import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_features, brute_gibbs, rel_close
from ebseqgan import maxent_il as il
from ebseqgan import seq_models as sm
from ebseqgan.gan_trainer import exact_generator_grad
from ebseqgan.numerics import finite_diff_grad, make_rng


def _cost(seed, V, scale=1.0):
    return sm.LinearEnergy(V, scale * make_rng(seed).standard_normal(V + V * V))


def _brute(c, V, T):
    return brute_gibbs(c.initial_cost, c.transition_cost, V, T)


class TestEnumeration:
    def test_zero_cost_is_uniform(self):
        d = il.enumerate_distribution(sm.LinearEnergy(3), 3, 4)
        np.testing.assert_allclose(d.probs, 3.0 ** -4, atol=1e-15)
        assert d.log_z == pytest.approx(4 * math.log(3), abs=1e-12)

    def test_two_item_analytic(self):
        c = sm.LinearEnergy(2, np.array([0.0, math.log(3), 0, 0, 0, 0]))
        d = il.enumerate_distribution(c, 2, 1)
        np.testing.assert_allclose(d.probs, [0.75, 0.25], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_plain_python(self, seed):
        c = _cost(seed, 3)
        d = il.enumerate_distribution(c, 3, 3)
        seqs, probs, log_z = _brute(c, 3, 3)
        assert abs(d.probs.sum() - 1) < 1e-12
        np.testing.assert_allclose(d.probs, probs, atol=1e-14)
        assert d.log_z == pytest.approx(log_z, abs=1e-12)
        fexp = np.sum([p * np.array(brute_features(s, 3)) for s, p in zip(seqs, probs)], axis=0)
        np.testing.assert_allclose(d.feature_expectation, fexp, atol=1e-12)

    def test_guard(self):
        with pytest.raises(il.InstanceTooLarge):
            il.enumerate_distribution(sm.LinearEnergy(11), 11, 6)


class TestPartitionDP:
    def test_zero_cost_log_z(self):
        assert il.partition_dp(sm.LinearEnergy(4), 4, 5).log_z == 5 * math.log(4)

    @given(st.integers(0, 10 ** 6), st.integers(2, 3), st.integers(1, 4))
    @settings(max_examples=30)
    def test_agrees_with_enumeration(self, seed, V, T):
        c = _cost(seed, V, 2.0)
        dp, en = il.partition_dp(c, V, T), il.enumerate_distribution(c, V, T)
        assert abs(dp.log_z - en.log_z) < 1e-10
        np.testing.assert_allclose(dp.log_prob(en.sequences), np.log(en.probs), atol=1e-10)
        np.testing.assert_allclose(dp.feature_expectation, en.feature_expectation, atol=1e-10)

    def test_large_instance_runs(self):
        d = il.partition_dp(_cost(0, 50), 50, 30)
        assert np.isfinite(d.log_z)

    def test_rejects_higher_order(self):
        with pytest.raises(ValueError):
            il.partition_dp(sm.LinearEnergy(2), 2, 3, order=2)


class TestSoftPolicy:
    @pytest.mark.parametrize("seed", range(5))
    def test_equals_gibbs_distribution(self, seed):
        c = _cost(seed, 3)
        P = il.enumerate_distribution(c, 3, 3)
        q = il.soft_dp_policy(c, 3, 3)
        assert il.kl_divergence(q, P) < 1e-10
        assert il.variational_objective(q, c, 3) == pytest.approx(-P.log_z, abs=1e-10)

    def test_zero_cost_uniform(self):
        q = il.soft_dp_policy(sm.LinearEnergy(3), 3, 4)
        for prefix in ([], [0], [2, 1], [1, 1, 0]):
            np.testing.assert_allclose(sm.next_step_dist(q, prefix), 1 / 3, atol=1e-15)


class TestKL:
    def test_self_is_zero(self):
        c = _cost(3, 2)
        P = il.enumerate_distribution(c, 2, 3)
        assert abs(il.kl_divergence(il.soft_dp_policy(c, 2, 3), P)) < 1e-12

    def test_analytic(self):
        c = sm.LinearEnergy(2, np.array([0.0, math.log(3), 0, 0, 0, 0]))
        P = il.enumerate_distribution(c, 2, 1)
        expected = 0.5 * math.log(2 / 3) + 0.5 * math.log(2)
        assert il.kl_divergence(sm.gen_init("tabular", 2), P) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.1438410362, abs=1e-9)

    def test_gibbs_inequality(self):
        r = make_rng(5)
        for _ in range(100):
            c = sm.LinearEnergy(3, r.standard_normal(12))
            q = sm.TabularGenerator(3, 1, r.standard_normal(12))
            assert il.kl_divergence(q, il.enumerate_distribution(c, 3, 3)) >= -1e-12
            assert il.kl_divergence(q, il.partition_dp(c, 3, 3)) >= -1e-12

    def test_enumeration_and_dp_routes_agree(self, random_chain):
        c = _cost(4, 3)
        q = random_chain(3)
        assert il.kl_divergence(q, il.enumerate_distribution(c, 3, 4)) == pytest.approx(
            il.kl_divergence(q, il.partition_dp(c, 3, 4)), abs=1e-10)

    def test_variational_identity(self, random_chain):
        for seed in range(10):
            c, q = _cost(seed, 3), random_chain(3)
            P = il.enumerate_distribution(c, 3, 3)
            assert il.variational_objective(q, c, 3) + P.log_z == pytest.approx(il.kl_divergence(q, P), abs=1e-9)


class TestLikelihoodGradient:
    def _demos(self, seed, V=3, T=4, n=30):
        return il.DemoSet(make_rng(seed).integers(0, V, (n, T)), V)

    def test_demo_set_feature_mean(self):
        d = self._demos(0)
        np.testing.assert_array_equal(d.feature_mean, np.mean([brute_features(s, 3) for s in d.seqs], axis=0))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration(self, seed):
        c, d = _cost(seed, 3), self._demos(seed)
        en = il.enumerate_distribution(c, 3, 4)
        np.testing.assert_allclose(il.exact_ll_grad(c, d), -d.feature_mean + en.feature_expectation, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        c, d = _cost(seed, 3), self._demos(seed)

        def ll(p):
            # explicit log-likelihood by summing log P over the demos with an enumerated log Z
            cc = c.with_params(p)
            return float(np.mean(-cc.energies(d.seqs)) - il.enumerate_distribution(cc, 3, 4).log_z)

        fd = finite_diff_grad(ll, c.params, 1e-5)
        assert np.all(rel_close(il.exact_ll_grad(c, d), fd, 1e-6, 1e-9))

    def test_fixed_point(self):
        c = _cost(1, 3)
        fexp = il.partition_dp(c, 3, 4).feature_expectation
        assert np.max(np.abs(il.exact_ll_grad(c, fexp, 4))) < 1e-12
        other = fexp.copy()
        other[0] += 1e-3
        other[1] -= 1e-3
        assert np.max(np.abs(il.exact_ll_grad(c, other, 4))) > 1e-9

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            il.exact_ll_grad(sm.LinearEnergy(2), np.zeros((0, 3), dtype=int))


class TestVariationalGrad:
    @pytest.mark.parametrize("time_indexed", [False, True])
    def test_matches_finite_differences(self, time_indexed):
        r = make_rng(2)
        q = sm.TabularGenerator(3, 1, time_indexed=time_indexed, horizon=4)
        q = q.with_params(r.standard_normal(q.n_params))
        c = _cost(2, 3)
        fd = finite_diff_grad(lambda p: il.variational_objective(q.with_params(p), c, 4), q.params)
        assert np.all(rel_close(il.variational_grad(q, c, 4), fd, 1e-6, 1e-8))

    def test_equals_score_function_gradient(self, random_chain):
        for seed in range(5):
            q, c = random_chain(3), _cost(seed, 3)
            np.testing.assert_allclose(il.variational_grad(q, c, 3), exact_generator_grad(q, c, 1.0, 3),
                                       atol=1e-10)

    def test_vanishes_at_soft_policy(self):
        c = _cost(0, 3)
        assert np.max(np.abs(il.variational_grad(il.soft_dp_policy(c, 3, 4), c, 4))) < 1e-12


class TestTwoStep:
    def test_cost_step_equals_likelihood_gradient_at_exact_policy(self):
        c = _cost(6, 3)
        d = il.DemoSet(make_rng(6).integers(0, 3, (25, 4)), 3)
        q = il.soft_dp_policy(c, 3, 4)
        np.testing.assert_allclose(il.cost_step_grad(q, d.feature_mean, 4), il.exact_ll_grad(c, d),
                                   atol=1e-12)

    def test_zero_step_is_identity(self):
        c = _cost(0, 3)
        d = make_rng(0).integers(0, 3, (10, 4))
        out, _, _ = il.two_step_solve(d, il.ILConfig(horizon=4, lr=0.0, max_rounds=1), 3, c_init=c)
        assert out.params.tobytes() == c.params.tobytes()

    def test_infinite_data_recovers_features(self):
        target = il.partition_dp(_cost(9, 3), 3, 4).feature_expectation
        c, q, hist = il.two_step_solve(target, il.ILConfig(horizon=4), 3)
        assert hist[-1]["feature_gap"] < 1e-3
        lls = [h["log_likelihood"] for h in hist]
        assert all(b >= a for a, b in zip(lls, lls[1:]))
        assert il.kl_divergence(q, il.enumerate_distribution(c, 3, 4)) < 1e-10

    def test_finite_demos_monotone(self):
        d = il.DemoSet(make_rng(4).integers(0, 2, (15, 3)), 2)
        _, _, hist = il.two_step_solve(d, il.ILConfig(horizon=3, max_rounds=100), 2)
        lls = [h["log_likelihood"] for h in hist]
        assert all(b >= a for a, b in zip(lls, lls[1:]))
        assert lls[-1] > lls[0]

    def test_rejects_non_finite_init(self):
        bad = sm.LinearEnergy(2, np.array([np.nan, 0, 0, 0, 0, 0]))
        with pytest.raises(ValueError):
            il.two_step_solve([[0, 1]], il.ILConfig(horizon=2), 2, c_init=bad)

    def test_problem_validation(self):
        with pytest.raises(ValueError):
            il.TabularMaxEntProblem(sm.LinearEnergy(2), 0)
        with pytest.raises(ValueError):
            il.TabularMaxEntProblem(sm.LinearEnergy(2), 3, il.DemoSet([[0, 1]], 2))


class TestEquivalence:
    def _instance(self, seed):
        r = make_rng(seed)
        gen = sm.TabularGenerator(3, 1, r.standard_normal(12))
        e = sm.LinearEnergy(3, r.standard_normal(12))
        demos = r.integers(0, 3, (20, 3))
        fake = sm.sample_batch(gen, 16, 3, r)[0]
        return gen, e, demos, fake

    @pytest.mark.parametrize("seed", range(5))
    def test_inactive_margin(self, seed):
        gen, e, demos, fake = self._instance(seed)
        m = float(e.energies(fake).max()) + 1
        rep = il.gan_il_equivalence_check(gen, e, demos, m, fake=fake)
        assert rep.regime == "inactive"
        assert rep.step_discrepancy < 1e-12
        assert rep.policy_discrepancy < 1e-10
        assert rep.ok()

    @pytest.mark.parametrize("seed", range(5))
    def test_saturated_margin_drops_fake_mean(self, seed):
        gen, e, demos, fake = self._instance(seed)
        m = float(e.energies(fake).min()) - 1
        rep = il.gan_il_equivalence_check(gen, e, demos, m, fake=fake)
        assert rep.regime == "saturated"
        np.testing.assert_allclose(rep.dropped_term, sm.feature_mean(fake, 3), atol=1e-12)
        assert rep.ok()

    def test_mixed_margin(self):
        gen, e, demos, fake = self._instance(11)
        m = float(np.median(e.energies(fake)))
        rep = il.gan_il_equivalence_check(gen, e, demos, m, fake=fake)
        assert rep.regime == "mixed"
        assert rep.dropped_term_error < 1e-12

    def test_requires_chain_and_linear_energy(self):
        gen, e, demos, _ = self._instance(0)
        with pytest.raises(ValueError):
            il.gan_il_equivalence_check(sm.gen_init("recurrent", 3), e, demos, 1.0)
        with pytest.raises(ValueError):
            il.gan_il_equivalence_check(gen, sm.energy_init("recurrent", 3), demos, 1.0)
