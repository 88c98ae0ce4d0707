# tests/test_environments.py
import pytest
import numpy as np
import pandas as pd
import sys
import os
from scipy.linalg import solve_discrete_lyapunov
sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.environments import (LQREnv, LqrOracle, PointMassTasks, lqr_q_oracle, lqr_value_matrix,
                              rollout, rollout_returns)
from src.errors import EnvironmentDivergenceError, InstabilityError
from src.policies import LinearPolicy


class TestLQR:
    def setup_method(self):
        self.rng = np.random.default_rng(42)
        self.env = LQREnv.default()
        self.K = 0.1 * self.rng.normal(size=(self.env.n_a, self.env.n_s))

    def test_default_instance_is_open_loop_stable(self):
        assert self.env.n_s == 4 and self.env.n_a == 2
        assert self.env.is_stable(np.zeros((2, 4)))
        np.testing.assert_array_equal(LQREnv.default().A, self.env.A)

    def test_value_matrix_matches_lyapunov_solver(self):
        P = lqr_value_matrix(self.env, self.K)
        L = self.env.closed_loop(self.K)
        C = self.env.Qc + self.K.T @ self.env.Rc @ self.K
        expected = solve_discrete_lyapunov(np.sqrt(self.env.gamma) * L.T, C)
        np.testing.assert_allclose(P, expected, rtol=1e-8)

    def test_q_of_policy_action_is_value(self):
        oracle = LqrOracle(self.env, self.K)
        s = self.rng.normal(size=(10, 4))
        np.testing.assert_allclose(oracle.q_value(s, s @ self.K.T), oracle.value(s), rtol=1e-10)

    def test_greedy_action_zeroes_gradient(self):
        oracle = LqrOracle(self.env, self.K)
        s = self.rng.normal(size=(10, 4))
        grad = oracle.action_grad(s, oracle.greedy_action(s))
        np.testing.assert_allclose(grad, 0.0, atol=1e-10)

    def test_gradient_matches_finite_differences(self):
        s = self.rng.normal(size=4)
        a = self.rng.normal(size=2)
        q, grad = lqr_q_oracle(self.env, self.K, s, a)
        oracle = LqrOracle(self.env, self.K)
        h = 1e-6
        numeric = [(oracle.q_value(s, a + h * e) - oracle.q_value(s, a - h * e)) / (2 * h)
                   for e in np.eye(2)]
        np.testing.assert_allclose(grad, numeric, rtol=1e-5)
        assert q == pytest.approx(oracle.q_value(s, a))

    def test_zero_discount_reduces_to_reward(self):
        env = LQREnv.default(gamma=0.0)
        oracle = LqrOracle(env, self.K)
        s = self.rng.normal(size=(5, 4))
        a = self.rng.normal(size=(5, 2))
        np.testing.assert_allclose(oracle.q_value(s, a), env.reward(s, a))
        np.testing.assert_allclose(oracle.action_grad(s, a), -2.0 * a @ env.Rc.T)

    def test_q_matches_long_rollout(self):
        oracle = LqrOracle(self.env, self.K)
        s = self.rng.normal(size=4)
        a = self.rng.normal(size=2)
        trajectory = rollout(self.env, LinearPolicy(self.K), horizon=3000, initial_state=s,
                             first_action=a, deterministic=True)
        assert trajectory.discounted_return() == pytest.approx(oracle.q_value(s, a), rel=1e-8)

    def test_unstable_policy_raises(self):
        K = 1000.0 * np.ones((2, 4))
        with pytest.raises(InstabilityError):
            lqr_value_matrix(self.env, K)

    def test_rollout_determinism_per_stream(self):
        policy = LinearPolicy(self.K, noise_std=0.1)
        first = rollout(self.env, policy, horizon=20, seed=3, stream=1)
        again = rollout(self.env, policy, horizon=20, seed=3, stream=1)
        other = rollout(self.env, policy, horizon=20, seed=3, stream=2)
        np.testing.assert_array_equal(first.states, again.states)
        np.testing.assert_array_equal(first.rewards, again.rewards)
        assert not np.allclose(first.states, other.states)
        assert first.transitions[-1].done and not first.transitions[0].done

    def test_rollout_returns_batched(self):
        policy = LinearPolicy(self.K)
        starts = self.rng.normal(size=(3, 4))
        actions = self.rng.normal(size=(3, 2))
        batched = rollout_returns(self.env, policy, starts, actions, 50, self.env.gamma)
        single = [rollout(self.env, policy, horizon=50, initial_state=s, first_action=a,
                          deterministic=True).discounted_return()
                  for s, a in zip(starts, actions)]
        np.testing.assert_allclose(batched, single, rtol=1e-10)

    def test_divergence_reports_step(self):
        policy = LinearPolicy(np.full((2, 4), np.nan))
        with pytest.raises(EnvironmentDivergenceError) as info:
            rollout(self.env, policy, horizon=5)
        assert info.value.step == 0

    def test_trajectory_csv(self, tmp_path):
        trajectory = rollout(self.env, LinearPolicy(self.K), horizon=4)
        path = trajectory.dump_csv(tmp_path / 'trajectory.csv')
        df = pd.read_csv(path)
        assert list(df.columns) == ['step', 's0', 's1', 's2', 's3', 'a0', 'a1', 'r', 'done']
        assert len(df) == 4
        manual = sum(self.env.gamma ** t * r for t, r in enumerate(trajectory.rewards))
        assert trajectory.discounted_return() == pytest.approx(manual)


class TestPointMass:
    def setup_method(self):
        self.tasks = PointMassTasks('goal', n_train=10, n_test=5, seed=0, horizon=20)

    def test_goal_splits(self):
        assert len(self.tasks.train) == 10 and len(self.tasks.test) == 5
        assert self.tasks.context_dim == 2
        for task in self.tasks.train + self.tasks.test:
            assert np.linalg.norm(task.context) == pytest.approx(1.0)
        ids = [t.task_id for t in self.tasks.train + self.tasks.test]
        assert ids == list(range(15))

    def test_goal_reward_and_clipping(self):
        env = self.tasks.env(self.tasks.train[0])
        s2, r = env.step(np.zeros(2), np.array([5.0, -5.0]))
        np.testing.assert_allclose(s2, [0.1, -0.1])
        assert r == pytest.approx(-np.linalg.norm(s2 - env.context))

    def test_greedy_goal_policy_reaches_goal(self):
        env = self.tasks.env(self.tasks.train[0])
        s = env.reset()
        for _ in range(env.horizon):
            s, r = env.step(s, env.greedy_action(s))
        assert r == pytest.approx(0.0, abs=1e-9)

    def test_fwd_back_tasks(self):
        tasks = PointMassTasks('fwd-back')
        assert tasks.context_dim == 1
        assert [t.context[0] for t in tasks.train] == [1.0, -1.0]
        assert tasks.test == tasks.train
        env = tasks.env(tasks.train[1])
        _, r = env.step(np.zeros(2), np.array([-1.0, 0.0]))
        assert r == pytest.approx(1.0)

    def test_sampling_is_seeded(self):
        a = self.tasks.sample(8, np.random.default_rng(1))
        b = self.tasks.sample(8, np.random.default_rng(1))
        assert [t.task_id for t in a] == [t.task_id for t in b]

    def test_sampling_without_replacement_when_pool_allows(self):
        ids = [t.task_id for t in self.tasks.sample(10, np.random.default_rng(2))]
        assert sorted(ids) == list(range(10))
        test_ids = [t.task_id for t in self.tasks.sample(5, np.random.default_rng(2), split='test')]
        assert sorted(test_ids) == list(range(10, 15))
        fwd_back = PointMassTasks('fwd-back')
        drawn = fwd_back.sample(40, np.random.default_rng(2))
        assert len(drawn) == 40 and {t.task_id for t in drawn} == {0, 1}

    def test_goal_reward_scores_the_position_reached(self):
        env = self.tasks.env(self.tasks.train[0])
        s = np.zeros(2)
        toward = env.greedy_action(s)
        _, r_toward = env.step(s, toward)
        _, r_away = env.step(s, -toward)
        assert r_toward > -1.0 > r_away
        assert env.reward(s, toward, env.context) == 0.0

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            PointMassTasks('ant-dir')


if __name__ == '__main__':
    pytest.main([__file__])
