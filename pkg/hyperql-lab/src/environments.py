# src/environments.py
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd

from .errors import EnvironmentDivergenceError, InstabilityError
from .utils import LabConfig, discounted_sum, make_rng

logger = logging.getLogger(__name__)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool


@dataclass
class Trajectory:
    transitions: List[Transition] = field(default_factory=list)
    gamma: float = 0.99

    def __len__(self):
        return len(self.transitions)

    @property
    def states(self):
        return np.array([t.s for t in self.transitions])

    @property
    def actions(self):
        return np.array([t.a for t in self.transitions])

    @property
    def rewards(self):
        return np.array([t.r for t in self.transitions])

    def discounted_return(self):
        return float(discounted_sum(self.rewards, self.gamma))

    def to_frame(self):
        rows = []
        for step, t in enumerate(self.transitions):
            row = {'step': step}
            row.update({f's{i}': v for i, v in enumerate(np.atleast_1d(t.s))})
            row.update({f'a{i}': v for i, v in enumerate(np.atleast_1d(t.a))})
            row['r'] = t.r
            row['done'] = bool(t.done)
            rows.append(row)
        return pd.DataFrame(rows)

    def dump_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format='%.17g')
        return path


# ---------------------------------------------------------------------------
# Linear-quadratic regulator
# ---------------------------------------------------------------------------
@dataclass
class LQREnv:
    """s' = A s + B a (+ noise), r = -(s'Qc s + a'Rc a). Episodes end only at the horizon."""
    A: np.ndarray
    B: np.ndarray
    Qc: np.ndarray
    Rc: np.ndarray
    gamma: float = 0.99
    horizon: int = 200
    init_low: float = -1.0
    init_high: float = 1.0
    noise_std: float = 0.0
    action_bound: float = 2.0

    @property
    def n_s(self):
        return self.A.shape[0]

    @property
    def n_a(self):
        return self.B.shape[1]

    @classmethod
    def default(cls, seed=LabConfig.LQR_SEED, n_s=4, n_a=2, **kwargs):
        """A = I + 0.1 (S - 0.5 I) with S a unit-norm skew matrix, B = 0.1 * N(0, 1)."""
        rng = make_rng(seed)
        m = rng.normal(size=(n_s, n_s))
        skew = (m - m.T) / 2.0
        norm = np.linalg.norm(skew, 2)
        if norm > 0:
            skew /= norm
        A = np.eye(n_s) + 0.1 * (skew - 0.5 * np.eye(n_s))
        B = 0.1 * rng.normal(size=(n_s, n_a))
        return cls(A=A, B=B, Qc=np.eye(n_s), Rc=0.1 * np.eye(n_a), **kwargs)

    def reset(self, rng, n=None):
        size = (self.n_s,) if n is None else (n, self.n_s)
        return rng.uniform(self.init_low, self.init_high, size=size)

    def reward(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        return -(np.einsum('...i,ij,...j->...', s, self.Qc, s)
                 + np.einsum('...i,ij,...j->...', a, self.Rc, a))

    def step(self, s, a, rng=None):
        s = np.asarray(s, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        s2 = s @ self.A.T + a @ self.B.T
        if self.noise_std > 0 and rng is not None:
            s2 = s2 + self.noise_std * rng.normal(size=s2.shape)
        return s2, self.reward(s, a)

    def closed_loop(self, K):
        return self.A + self.B @ np.asarray(K, dtype=np.float64)

    def is_stable(self, K):
        radius = np.max(np.abs(np.linalg.eigvals(self.closed_loop(K))))
        return radius < 1.0 / np.sqrt(self.gamma) if self.gamma > 0 else True


def lqr_value_matrix(env, K, tol=1e-12, max_iter=1_000_000):
    """P solving P = Qc + K'Rc K + gamma L'PL, L = A + BK, by fixed-point iteration."""
    K = np.asarray(K, dtype=np.float64)
    if not env.is_stable(K):
        raise InstabilityError("closed loop A+BK is not stable under the discount")
    L = env.closed_loop(K)
    C = env.Qc + K.T @ env.Rc @ K
    P = C.copy()
    for _ in range(max_iter):
        P_next = C + env.gamma * L.T @ P @ L
        if np.max(np.abs(P_next - P)) < tol:
            return P_next
        P = P_next
    raise InstabilityError(f"value iteration did not converge in {max_iter} iterations")


class LqrOracle:
    """Exact Q^pi and grad_a Q^pi for the linear policy a = K s."""

    def __init__(self, env, K):
        self.env = env
        self.K = np.asarray(K, dtype=np.float64)
        self.P = lqr_value_matrix(env, self.K)

    def value(self, s):
        s = np.asarray(s, dtype=np.float64)
        return -np.einsum('...i,ij,...j->...', s, self.P, s)

    def next_state(self, s, a):
        return np.asarray(s) @ self.env.A.T + np.asarray(a) @ self.env.B.T

    def q_value(self, s, a):
        return self.env.reward(s, a) + self.env.gamma * self.value(self.next_state(s, a))

    def action_grad(self, s, a):
        a = np.asarray(a, dtype=np.float64)
        x = self.next_state(s, a)
        return -2.0 * a @ self.env.Rc.T - 2.0 * self.env.gamma * x @ self.P.T @ self.env.B

    def greedy_action(self, s):
        env = self.env
        H = env.Rc + env.gamma * env.B.T @ self.P @ env.B
        lin = env.gamma * env.B.T @ self.P @ env.A
        return -np.asarray(s) @ np.linalg.solve(H, lin).T


def lqr_q_oracle(env, K, s, a):
    oracle = LqrOracle(env, K)
    return oracle.q_value(s, a), oracle.action_grad(s, a)


# ---------------------------------------------------------------------------
# Point-mass task families
# ---------------------------------------------------------------------------
@dataclass
class TaskContext:
    task_id: int
    context: np.ndarray
    family: str


@dataclass
class PointMassEnv:
    """2-D point mass driven by a clipped velocity action.

    'goal': reward -||s' - c|| for a goal c on the unit circle.
    The distance is measured at the post-step position s', not at s, so every
    reward depends on the action just taken.
    'fwd-back': reward c * (s'_1 - s_1) / dt for a direction c in {+1, -1}.
    """
    context: np.ndarray
    family: str = 'goal'
    horizon: int = 200
    dt: float = 0.1
    gamma: float = 0.95
    n_s: int = 2
    n_a: int = 2
    action_bound: float = 1.0

    def reset(self, rng=None, n=None):
        return np.zeros(self.n_s) if n is None else np.zeros((n, self.n_s))

    def reward(self, s, a, s2):
        if self.family == 'goal':
            return -np.linalg.norm(s2 - self.context, axis=-1)
        return self.context[0] * (s2[..., 0] - s[..., 0]) / self.dt

    def step(self, s, a, rng=None):
        s = np.asarray(s, dtype=np.float64)
        a = np.clip(np.asarray(a, dtype=np.float64), -self.action_bound, self.action_bound)
        s2 = s + self.dt * a
        return s2, self.reward(s, a, s2)

    def greedy_action(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.family == 'goal':
            delta = (self.context - s) / self.dt
            return np.clip(delta, -self.action_bound, self.action_bound)
        a = np.zeros_like(s)
        a[..., 0] = self.action_bound * np.sign(self.context[0])
        return a


class PointMassTasks:
    """Task family with fixed train/test splits of oracle contexts."""
    FAMILIES = ('goal', 'fwd-back')

    def __init__(self, family='goal', n_train=100, n_test=30, seed=0, horizon=200, gamma=0.95):
        if family not in self.FAMILIES:
            raise ValueError(f"family must be one of {self.FAMILIES}")
        self.family = family
        self.horizon = horizon
        self.gamma = gamma
        rng = make_rng(seed, 11)
        if family == 'fwd-back':
            self.train = [TaskContext(0, np.array([1.0]), family),
                          TaskContext(1, np.array([-1.0]), family)]
            self.test = list(self.train)
        else:
            angles = rng.uniform(0.0, 2.0 * np.pi, size=n_train + n_test)
            goals = np.stack([np.cos(angles), np.sin(angles)], axis=1)
            tasks = [TaskContext(i, goals[i], family) for i in range(n_train + n_test)]
            self.train = tasks[:n_train]
            self.test = tasks[n_train:]

    @property
    def context_dim(self):
        return 1 if self.family == 'fwd-back' else 2

    def env(self, task):
        return PointMassEnv(context=np.asarray(task.context, dtype=np.float64), family=self.family,
                            horizon=self.horizon, gamma=self.gamma)

    def sample(self, n, rng, split='train'):
        """n tasks from the split; without replacement unless n exceeds the pool."""
        pool = self.train if split == 'train' else self.test
        idx = rng.choice(len(pool), size=n, replace=n > len(pool))
        return [pool[i] for i in idx]


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------
def rollout(env, policy, horizon=None, seed=0, stream=0, initial_state=None, first_action=None,
            deterministic=False):
    """One episode; reproducible per (seed, stream)."""
    horizon = env.horizon if horizon is None else horizon
    rng = make_rng(seed, stream)
    s = env.reset(rng) if initial_state is None else np.array(initial_state, dtype=np.float64)
    trajectory = Trajectory(gamma=env.gamma)
    for step in range(horizon):
        if step == 0 and first_action is not None:
            a = np.array(first_action, dtype=np.float64)
        else:
            a = policy.act(s, rng, deterministic=deterministic)
        s2, r = env.step(s, a, rng)
        if not np.all(np.isfinite(s2)):
            raise EnvironmentDivergenceError(step)
        trajectory.transitions.append(Transition(s, a, float(r), s2, step == horizon - 1))
        s = s2
    return trajectory


def rollout_returns(env, policy, initial_states, first_actions, horizon, gamma, rng=None,
                    deterministic=True):
    """Discounted returns of N parallel episodes started from (s_i, a_i) then following the policy."""
    s = np.array(initial_states, dtype=np.float64)
    a = np.array(first_actions, dtype=np.float64)
    total = np.zeros(s.shape[0])
    for step in range(horizon):
        if step > 0:
            a = policy.act(s, rng, deterministic=deterministic)
        s, r = env.step(s, a, rng)
        if not np.all(np.isfinite(s)):
            raise EnvironmentDivergenceError(step)
        total += gamma ** step * r
    return total
