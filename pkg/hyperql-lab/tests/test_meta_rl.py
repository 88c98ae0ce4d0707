# tests/test_meta_rl.py
import pytest
import numpy as np
import sys
import os
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.environments import PointMassTasks
from src.errors import ContractError
from src.meta_rl import (INNER, MODEL_KINDS, OUTER, MetaConfig, MetaPolicy, TaskRollouts, adapt,
                         advantage_estimate, collect_task, direct_gradient, evaluate_tasks,
                         factored_gradient, factored_meta_gradient, grad_noise_harness,
                         make_meta_policy, meta_gradient, meta_train, multi_task_gradient,
                         outer_rollouts, surrogate, task_policy_gradient)
from src.networks import flat_params
from src.policies import LOG_2PI
from src.tensor_core import finite_difference_grad, gradcheck, relative_error
from src.utils import discounted_sum


def tiny_meta(**overrides):
    params = dict(family='goal', horizon=8, batch=4, meta_batch=3, hidden=(8,), dynamic_hidden=8,
                  widths=(8, 16), n_train_tasks=6, n_test_tasks=2, iterations=4,
                  checkpoints=(2, 4), harness_repeats=3, inner_lr=0.05, outer_lr=1e-2, seed=0)
    params.update(overrides)
    return MetaConfig(**params)


class TestMetaPolicy:
    def setup_method(self):
        self.rng = np.random.default_rng(42)
        self.states = self.rng.normal(size=(5, 2))
        self.actions = self.rng.normal(size=(5, 2))
        self.context = np.array([0.6, 0.8])

    def test_log_prob_formula(self):
        for kind in ('context-mlp', 'hyper-context', 'no-context'):
            policy = MetaPolicy(kind, 2, 2, 2, hidden=(8,), dynamic_hidden=8, widths=(8, 16))
            mean, log_std = policy.distribution(self.states, self.context)
            std = np.exp(log_std.data)
            z = (self.actions - mean.data) / std
            expected = np.sum(-0.5 * z ** 2 - log_std.data - 0.5 * LOG_2PI, axis=1)
            np.testing.assert_allclose(policy.log_prob(self.states, self.actions, self.context).data,
                                       expected, rtol=1e-12)

    def test_context_dependence(self):
        other = np.array([-0.8, 0.6])
        for kind, depends in (('context-mlp', True), ('hyper-context', True), ('no-context', False)):
            policy = MetaPolicy(kind, 2, 2, 2, hidden=(8,), dynamic_hidden=8, widths=(8, 16),
                                seed=1)
            a = policy.act(self.states, context=self.context, deterministic=True)
            b = policy.act(self.states, context=other, deterministic=True)
            assert (not np.array_equal(a, b)) == depends

    def test_weights_only_for_hyper(self):
        policy = MetaPolicy('context-mlp', 2, 2, 2, hidden=(8,))
        with pytest.raises(ContractError):
            policy.weights(self.context)
        hyper = MetaPolicy('hyper-context', 2, 2, 2, dynamic_hidden=8, widths=(8, 16))
        assert hyper.weights(self.context).log_std.shape == (1, 2)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            MetaPolicy('pearl', 2, 2, 2)

    def test_make_meta_policy_uses_family_context(self):
        family = PointMassTasks('fwd-back', horizon=8)
        policy = make_meta_policy(tiny_meta(model='context-mlp'), family)
        assert policy.context_dim == 1
        assert policy.mlp.in_dim == 3


class TestRollouts:
    def setup_method(self):
        self.cfg = tiny_meta()
        self.family = PointMassTasks('goal', 6, 2, seed=0, horizon=8)
        self.policy = make_meta_policy(self.cfg, self.family)

    def test_baseline_invariance(self):
        rewards = np.random.default_rng(0).normal(size=(4, 8))
        shifted = advantage_estimate(rewards + 3.0, 0.95)
        np.testing.assert_allclose(shifted, advantage_estimate(rewards, 0.95), atol=1e-12)
        np.testing.assert_allclose(advantage_estimate(rewards, 0.95).mean(axis=0), 0.0, atol=1e-12)

    def test_collect_is_keyed_by_task_and_phase(self):
        task = self.family.train[2]
        a = collect_task(self.policy, self.family, task, 0, 1, OUTER, 4)
        b = collect_task(self.policy, self.family, task, 0, 1, OUTER, 4)
        c = collect_task(self.policy, self.family, task, 0, 1, INNER, 4)
        np.testing.assert_array_equal(a.actions, b.actions)
        assert not np.allclose(a.actions, c.actions)
        assert a.states.shape == (4, 8, 2)
        np.testing.assert_allclose(a.discounted_returns(0.95), discounted_sum(a.rewards, 0.95))

    def test_gradients_are_task_order_invariant(self):
        tasks = self.family.train[:3]
        forward = meta_gradient(self.policy, self.family, tasks, 0.05, 0, 1, 4, 8)
        backward = meta_gradient(self.policy, self.family, tasks[::-1], 0.05, 0, 1, 4, 8)
        np.testing.assert_array_equal(forward, backward)

    def test_repeated_tasks_get_distinct_rollouts(self):
        family = PointMassTasks('fwd-back', horizon=8)
        policy = make_meta_policy(tiny_meta(family='fwd-back'), family)
        tasks = family.sample(40, np.random.default_rng(3))
        batches = outer_rollouts(policy, family, tasks, 0, 1, 4, 8)
        assert len(batches) == 40
        assert len({batch.actions.tobytes() for batch in batches}) == 40
        first = collect_task(policy, family, family.train[0], 0, 1, OUTER, 4, 8)
        np.testing.assert_array_equal(batches[0].actions, first.actions)

    def test_repeated_tasks_keep_order_invariance(self):
        tasks = [self.family.train[1], self.family.train[0], self.family.train[1]]
        forward = meta_gradient(self.policy, self.family, tasks, 0.05, 0, 1, 4, 8)
        backward = meta_gradient(self.policy, self.family, tasks[::-1], 0.05, 0, 1, 4, 8)
        np.testing.assert_array_equal(forward, backward)
        once = meta_gradient(self.policy, self.family, tasks[:1], 0.05, 0, 1, 4, 8)
        twice = meta_gradient(self.policy, self.family, tasks[::2], 0.05, 0, 1, 4, 8)
        assert not np.allclose(twice, 2.0 * once)

    def test_zero_inner_step_is_multi_task(self):
        tasks = self.family.train[:3]
        maml = meta_gradient(self.policy, self.family, tasks, 0.0, 0, 2, 4, 8)
        multi = multi_task_gradient(self.policy, self.family, tasks, 0, 2, 4, 8)
        np.testing.assert_allclose(maml, multi, rtol=1e-12, atol=1e-14)

    def test_meta_gradient_leaves_parameters(self):
        before = flat_params(self.policy).copy()
        meta_gradient(self.policy, self.family, self.family.train[:2], 0.05, 0, 1, 4, 8)
        np.testing.assert_array_equal(flat_params(self.policy), before)

    def test_direct_gradient_is_additive(self):
        batch = outer_rollouts(self.policy, self.family, self.family.train[:1], 0, 1, 4, 8)[0]
        single = direct_gradient(self.policy, [batch])
        np.testing.assert_allclose(direct_gradient(self.policy, [batch, batch]), 2.0 * single,
                                   rtol=1e-12)

    def test_surrogate_needs_trajectories(self):
        empty = TaskRollouts(self.family.train[0], np.zeros((0, 8, 2)), np.zeros((0, 8, 2)),
                             np.zeros((0, 8)), np.zeros((0, 8)))
        with pytest.raises(ContractError):
            direct_gradient(self.policy, [empty])


class TestPolicyGradient:
    def setup_method(self):
        self.rng = np.random.default_rng(42)
        self.family = PointMassTasks('goal', 6, 2, seed=0, horizon=8)

    def test_one_step_gaussian_bandit_gradient(self):
        policy = MetaPolicy('no-context', 2, 2, 2, hidden=(), seed=3)
        policy.log_std.data[...] = [[-0.3, 0.2]]
        n = 16
        states = self.rng.normal(size=(n, 1, 2))
        actions = self.rng.normal(size=(n, 1, 2))
        adv = self.rng.normal(size=(n, 1))
        rollouts = TaskRollouts(self.family.train[0], states, actions, np.zeros((n, 1)), adv)
        task_policy_gradient(policy, rollouts)

        layer = policy.mlp.layers[0]
        s, a, A = states[:, 0], actions[:, 0], adv
        var = np.exp(2.0 * policy.log_std.data)
        mu = s @ layer.weight.data + layer.bias.data
        score = A * (a - mu) / var
        np.testing.assert_allclose(layer.bias.grad, score.mean(axis=0), rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(layer.weight.grad, s.T @ score / n, rtol=1e-8, atol=1e-12)
        expected_std = (A * ((a - mu) ** 2 / var - 1.0)).mean(axis=0, keepdims=True)
        np.testing.assert_allclose(policy.log_std.grad, expected_std, rtol=1e-8, atol=1e-12)

    def test_surrogate_gradient_matches_finite_differences(self):
        for kind in MODEL_KINDS:
            policy = MetaPolicy(kind, 2, 2, 2, hidden=(8,), dynamic_hidden=8, widths=(8,),
                                seed=1)
            rollouts = collect_task(policy, self.family, self.family.train[1], 0, 1, OUTER, 3, 4)
            assert gradcheck(lambda: surrogate(policy, rollouts), policy.parameters()) <= 1e-5

    def test_multi_task_gradient_matches_finite_differences(self):
        policy = make_meta_policy(tiny_meta(model='context-mlp'), self.family)
        tasks = self.family.train[:3]
        batches = outer_rollouts(policy, self.family, tasks, 0, 4, 4, 8)

        def total():
            value = surrogate(policy, batches[0])
            for rollouts in batches[1:]:
                value = value + surrogate(policy, rollouts)
            return value

        numeric = np.concatenate([g.ravel() for g in
                                  finite_difference_grad(total, policy.parameters())])
        analytic = multi_task_gradient(policy, self.family, tasks, 0, 4, 4, 8)
        assert relative_error(analytic, numeric) <= 1e-5

    def test_zero_inner_step_returns_parameters(self):
        policy = make_meta_policy(tiny_meta(), self.family)
        phi = adapt(policy, self.family, self.family.train[0], 0.0)
        np.testing.assert_array_equal(phi, flat_params(policy))

    def test_adaptation_improves_task_return(self):
        family = PointMassTasks('goal', 10, 10, seed=0, horizon=10)
        wins = 0
        for seed in range(5):
            cfg = tiny_meta(model='no-context', hidden=(16,), horizon=10, batch=20, seed=seed)
            policy = make_meta_policy(cfg, family)
            before = evaluate_tasks(policy, family, family.test, 10)
            after = evaluate_tasks(policy, family, family.test, 10, inner_lr=0.1, seed=seed)
            wins += after > before
        assert wins >= 4


class TestFactorization:
    def test_factored_equals_direct(self):
        family = PointMassTasks('goal', 6, 2, seed=0, horizon=8)
        for seed in range(20):
            policy = make_meta_policy(tiny_meta(seed=seed), family)
            for batch_id in range(5):
                tasks = family.sample(3, np.random.default_rng([seed, batch_id]))
                batches = outer_rollouts(policy, family, tasks, seed, batch_id, 4, 8)
                direct = direct_gradient(policy, batches)
                factored = factored_gradient(policy, batches)
                assert relative_error(factored, direct) <= 1e-8

    def test_equal_context_tasks_pool_into_one(self):
        family = PointMassTasks('goal', 6, 2, seed=0, horizon=8)
        policy = make_meta_policy(tiny_meta(), family)
        task = family.train[0]
        first = collect_task(policy, family, task, 0, 1, OUTER, 4, 8)
        second = collect_task(policy, family, task, 0, 1, OUTER, 4, 8, occurrence=1)
        pooled = TaskRollouts(task, *(np.concatenate([getattr(first, name), getattr(second, name)])
                                      for name in ('states', 'actions', 'rewards', 'advantages')))
        # each task surrogate averages over its own trajectories
        two_tasks = factored_gradient(policy, [first, second])
        assert relative_error(two_tasks, 2.0 * factored_gradient(policy, [pooled])) <= 1e-8
        assert relative_error(two_tasks, 2.0 * direct_gradient(policy, [pooled])) <= 1e-8

    def test_factored_meta_gradient_on_fwd_back(self):
        family = PointMassTasks('fwd-back', horizon=8)
        policy = make_meta_policy(tiny_meta(family='fwd-back'), family)
        factored = factored_meta_gradient(policy, family, family.train, 0, 3, 4, 8)
        direct = multi_task_gradient(policy, family, family.train, 0, 3, 4, 8)
        assert relative_error(factored, direct) <= 1e-8

    def test_factored_needs_hyper_policy(self):
        family = PointMassTasks('goal', 6, 2, seed=0, horizon=8)
        policy = make_meta_policy(tiny_meta(model='context-mlp'), family)
        with pytest.raises(ContractError):
            factored_gradient(policy, [])


class TestHarnessAndTraining:
    def setup_method(self):
        self.cfg = tiny_meta()
        self.family = PointMassTasks('goal', 6, 2, seed=0, horizon=8)
        self.policy = make_meta_policy(self.cfg, self.family)

    def test_harness_restores_parameters(self):
        before = flat_params(self.policy).copy()
        stats = grad_noise_harness(self.policy, self.family, self.cfg)
        np.testing.assert_array_equal(flat_params(self.policy), before)
        assert stats['std_return'] is not None
        assert stats['var_return'] == pytest.approx(stats['std_return'] ** 2)
        assert stats['cov'] == pytest.approx(stats['std_return'] / abs(stats['mean_return']))

    def test_single_repeat_has_no_spread(self):
        stats = grad_noise_harness(self.policy, self.family, self.cfg, n_repeats=1)
        assert stats['std_return'] is None and stats['cov'] is None
        assert np.isfinite(stats['mean_return'])

    def test_evaluation_is_deterministic(self):
        first = evaluate_tasks(self.policy, self.family, self.family.test, 8)
        again = evaluate_tasks(self.policy, self.family, self.family.test, 8)
        assert first == again

    def test_meta_train_rows_and_checkpoints(self, tmp_path):
        seen = []
        rows = meta_train(self.policy, self.family, self.cfg, checkpoint_dir=str(tmp_path),
                          on_checkpoint=lambda it, policy: seen.append(it))
        assert [r['iteration'] for r in rows] == [2, 4]
        assert seen == [2, 4]
        assert sorted(os.listdir(tmp_path)) == ['iter_00002.ckpt', 'iter_00004.ckpt']
        assert set(rows[0]) == {'iteration', 'model_kind', 'objective', 'train_pre', 'train_post',
                                'test_pre', 'test_post'}

    def test_meta_train_is_reproducible(self):
        first = meta_train(make_meta_policy(self.cfg, self.family), self.family, self.cfg)
        second = meta_train(make_meta_policy(self.cfg, self.family), self.family, self.cfg)
        assert first == second

    def test_multi_task_objective(self):
        cfg = tiny_meta(objective='multi-task', model='no-context')
        rows = meta_train(make_meta_policy(cfg, self.family), self.family, cfg)
        assert rows[-1]['test_pre'] == rows[-1]['test_post']

    def test_unknown_objective(self):
        cfg = tiny_meta(objective='reptile')
        with pytest.raises(ContractError):
            meta_train(self.policy, self.family, cfg)

    @pytest.mark.slow
    def test_hyper_context_has_lower_gradient_noise(self):
        wins = 0
        for seed in range(5):
            medians = {}
            for model in ('hyper-context', 'context-mlp'):
                cfg = MetaConfig(model=model, seed=seed, iterations=120, checkpoints=(30, 60, 90, 120),
                                 meta_batch=10, batch=20, horizon=200, harness_repeats=50,
                                 n_test_tasks=10)
                family = PointMassTasks(cfg.family, cfg.n_train_tasks, cfg.n_test_tasks, seed,
                                        cfg.horizon, cfg.gamma)
                covs = []
                meta_train(make_meta_policy(cfg, family), family, cfg,
                           on_checkpoint=lambda it, p: covs.append(
                               grad_noise_harness(p, family, cfg, round_id=it)['cov']))
                medians[model] = np.median(covs)
            wins += medians['hyper-context'] <= medians['context-mlp']
        assert wins >= 3


if __name__ == '__main__':
    pytest.main([__file__])
