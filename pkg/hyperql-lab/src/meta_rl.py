# src/meta_rl.py
"""
Context-conditioned Gaussian meta-policies trained with first-order MAML or
the multi-task objective (no adaptation), plus the gradient-noise harness.

Randomness is drawn per (seed, round, task_id, phase, occurrence) with phase 0
for inner (adaptation) rollouts and phase 1 for outer rollouts. occurrence
counts earlier copies of the same task in the batch, so a task drawn twice gets
fresh trajectories while samples still do not depend on batch order. Task sums
run in task-id order.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .checkpoint import save_modules
from .errors import ContractError, EnvironmentDivergenceError
from .hypernet import DynamicSpec, InitScheme, PrimaryNet, dynamic_forward
from .networks import MLP, Module, flat_grad, flat_params, set_flat_params
from .optim import Adam
from .policies import LOG_2PI
from .tensor_core import as_tensor, backward, concat, exp, repeat_rows, tsum
from .utils import LabConfig, make_rng, returns_to_go

logger = logging.getLogger(__name__)

INNER, OUTER = 0, 1
MODEL_KINDS = ('context-mlp', 'hyper-context', 'no-context')
OBJECTIVES = ('maml', 'multi-task')


@dataclass
class MetaConfig:
    family: str = 'goal'
    model: str = 'hyper-context'
    objective: str = 'maml'
    meta_batch: int = 40
    batch: int = 20
    horizon: int = 200
    gamma: float = 0.95
    inner_lr: float = 0.1
    outer_lr: float = 1e-3
    harness_lr: float = 1e-3
    iterations: int = 450
    checkpoints: tuple = (50, 150, 300, 450)
    harness_repeats: int = 50
    hidden: tuple = (64, 64)
    dynamic_hidden: int = 64
    widths: tuple = LabConfig.DESK_WIDTHS
    init_scheme: str = 'small_heads'
    n_train_tasks: int = 100
    n_test_tasks: int = 30
    seed: int = 0


class MetaPolicy(Module):
    """Gaussian policy pi(a | s, c) with a learned per-dimension log-std.

    'context-mlp' concatenates the context to the state; 'hyper-context'
    feeds the context to a primary network whose output parameterizes the
    mean network and the log-std; 'no-context' ignores the context.
    """

    def __init__(self, kind, n_s, n_a, context_dim, hidden=(64, 64), dynamic_hidden=64,
                 widths=LabConfig.DESK_WIDTHS, scheme=None, seed=0):
        super().__init__()
        if kind not in MODEL_KINDS:
            raise ContractError(f"unknown meta-policy kind '{kind}'")
        self.kind = kind
        self.n_s = n_s
        self.n_a = n_a
        self.context_dim = context_dim
        if kind == 'hyper-context':
            spec = DynamicSpec(n_s, n_a, dynamic_hidden, gains=True, std_head=True)
            self.primary = self.add_module('primary', PrimaryNet(
                context_dim, spec, widths, scheme or InitScheme.small_heads(), seed))
        else:
            in_dim = n_s + context_dim if kind == 'context-mlp' else n_s
            self.mlp = self.add_module('mlp', MLP(in_dim, hidden, n_a, make_rng(seed, 81)))
            self.log_std = self.add_param('log_std', np.zeros((1, n_a)))

    @property
    def is_hyper(self):
        return self.kind == 'hyper-context'

    def weights(self, context):
        """Dynamic weights for one context (hyper-context only), batch axis of 1."""
        if not self.is_hyper:
            raise ContractError(f"{self.kind} policy has no dynamic weights")
        return self.primary(np.asarray(context, dtype=np.float64).reshape(1, -1))

    def distribution(self, states, context, weights=None):
        """(mean [B x n_a], log_std [1 x n_a]) tensors."""
        states = as_tensor(states)
        if self.is_hyper:
            w = weights if weights is not None else self.weights(context)
            return dynamic_forward(w, states), w.log_std
        if self.kind == 'context-mlp':
            ctx = repeat_rows(np.asarray(context, dtype=np.float64).reshape(1, -1),
                              states.shape[0])
            return self.mlp(concat([states, ctx], axis=-1)), self.log_std
        return self.mlp(states), self.log_std

    def log_prob(self, states, actions, context, weights=None):
        mean, log_std = self.distribution(states, context, weights)
        z = (as_tensor(actions) - mean) / exp(log_std)
        return tsum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=1)

    def act(self, s, rng=None, context=None, deterministic=False, weights=None):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        with self.frozen():
            mean, log_std = self.distribution(s, context, weights)
        a = mean.data
        if not deterministic and rng is not None:
            a = a + np.exp(log_std.data) * rng.standard_normal(a.shape)
        return a


def make_meta_policy(cfg, family):
    scheme = InitScheme.by_name(cfg.init_scheme)
    return MetaPolicy(cfg.model, 2, 2, family.context_dim, cfg.hidden, cfg.dynamic_hidden,
                      cfg.widths, scheme, cfg.seed)


@dataclass
class TaskRollouts:
    """N parallel trajectories of one task, stacked [N x H x ...]."""
    task: object
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    advantages: Optional[np.ndarray] = None

    @property
    def n_traj(self):
        return self.states.shape[0]

    def discounted_returns(self, gamma):
        return returns_to_go(self.rewards, gamma)[:, 0]


def advantage_estimate(rewards, gamma):
    """Return-to-go minus its mean over the task's trajectories at each time step."""
    rtg = returns_to_go(rewards, gamma)
    return rtg - rtg.mean(axis=0, keepdims=True)


def collect(policy, env, task, n_traj, horizon, rng, deterministic=False):
    """Vectorized rollouts of one task; the dynamic weights are computed once."""
    weights = None
    if policy.is_hyper:
        with policy.frozen():
            weights = policy.weights(task.context)
    s = env.reset(n=n_traj)
    states = np.zeros((n_traj, horizon, env.n_s))
    actions = np.zeros((n_traj, horizon, env.n_a))
    rewards = np.zeros((n_traj, horizon))
    for t in range(horizon):
        a = policy.act(s, rng, task.context, deterministic=deterministic, weights=weights)
        s2, r = env.step(s, a)
        if not np.all(np.isfinite(s2)):
            raise EnvironmentDivergenceError(t)
        states[:, t], actions[:, t], rewards[:, t] = s, a, r
        s = s2
    return TaskRollouts(task, states, actions, rewards, advantage_estimate(rewards, env.gamma))


def collect_task(policy, family, task, seed, round_id, phase, n_traj, horizon=None,
                 occurrence=0):
    rng = make_rng(seed, round_id, task.task_id, phase, occurrence)
    return collect(policy, family.env(task), task, n_traj, horizon or family.horizon, rng)


def surrogate(policy, rollouts, weights=None):
    """sum_t A_t log pi(a_t | s_t) averaged over trajectories, as a scalar tensor."""
    if rollouts.n_traj == 0:
        raise ContractError("policy gradient needs at least one trajectory")
    n_s, n_a = rollouts.states.shape[-1], rollouts.actions.shape[-1]
    logp = policy.log_prob(rollouts.states.reshape(-1, n_s), rollouts.actions.reshape(-1, n_a),
                           rollouts.task.context, weights)
    return tsum(logp * rollouts.advantages.reshape(-1)) * (1.0 / rollouts.n_traj)


def task_policy_gradient(policy, rollouts):
    """Flat gradient of the task surrogate with respect to all policy parameters."""
    policy.zero_grad()
    backward(surrogate(policy, rollouts))
    return flat_grad(policy)


def _sorted(tasks):
    return sorted(tasks, key=lambda task: task.task_id)


def _keyed(tasks):
    """(task, occurrence) pairs in task-id order; occurrence numbers repeats of one task id."""
    seen = {}
    keyed = []
    for task in _sorted(tasks):
        occurrence = seen.get(task.task_id, 0)
        seen[task.task_id] = occurrence + 1
        keyed.append((task, occurrence))
    return keyed


def adapt(policy, family, task, inner_lr, seed=0, round_id=0, n_traj=20, horizon=None,
          occurrence=0):
    """phi_i = phi + inner_lr * task gradient from fresh inner rollouts; phi is not modified."""
    phi = flat_params(policy)
    if inner_lr == 0.0:
        return phi
    rollouts = collect_task(policy, family, task, seed, round_id, INNER, n_traj, horizon,
                            occurrence)
    return phi + inner_lr * task_policy_gradient(policy, rollouts)


def adapted_copy(policy, phi):
    twin = policy.copy()
    set_flat_params(twin, phi)
    return twin


def meta_gradient(policy, family, tasks, inner_lr, seed=0, round_id=0, n_traj=20, horizon=None):
    """First-order MAML: sum over tasks of the task gradient at the adapted parameters."""
    total = np.zeros(policy.num_parameters())
    for task, occurrence in _keyed(tasks):
        phi_i = adapt(policy, family, task, inner_lr, seed, round_id, n_traj, horizon, occurrence)
        adapted = adapted_copy(policy, phi_i)
        rollouts = collect_task(adapted, family, task, seed, round_id, OUTER, n_traj, horizon,
                                occurrence)
        total = total + task_policy_gradient(adapted, rollouts)
    return total


def outer_rollouts(policy, family, tasks, seed=0, round_id=0, n_traj=20, horizon=None):
    return [collect_task(policy, family, task, seed, round_id, OUTER, n_traj, horizon,
                         occurrence)
            for task, occurrence in _keyed(tasks)]


def direct_gradient(policy, batches):
    total = np.zeros(policy.num_parameters())
    for rollouts in batches:
        total = total + task_policy_gradient(policy, rollouts)
    return total


def multi_task_gradient(policy, family, tasks, seed=0, round_id=0, n_traj=20, horizon=None):
    """Sum over tasks of the task gradient at the current parameters (no adaptation)."""
    return direct_gradient(policy, outer_rollouts(policy, family, tasks, seed, round_id,
                                                  n_traj, horizon))


def factored_gradient(policy, batches):
    """Gradient accumulated in dynamic-weight space per task, then pulled through the primary once.

    G_i = d surrogate_i / d w(c_i) is taken with w as a detached leaf; the
    parameter gradient is then d/dphi sum_g <w_g(c_i), G_i,g>.
    """
    if not policy.is_hyper:
        raise ContractError(f"factored gradient needs a hyper-context policy, got {policy.kind}")
    policy.zero_grad()
    for rollouts in batches:
        with policy.frozen():
            leaves = policy.weights(rollouts.task.context).detached(requires_grad=True)
        backward(surrogate(policy, rollouts, weights=leaves))
        weights = policy.weights(rollouts.task.context)
        pull = None
        for name, w in weights.groups().items():
            leaf = leaves.groups()[name]
            if leaf.grad is None:
                continue
            term = tsum(w * leaf.grad)
            pull = term if pull is None else pull + term
        if pull is not None:
            backward(pull)
    return flat_grad(policy)


def factored_meta_gradient(policy, family, tasks, seed=0, round_id=0, n_traj=20, horizon=None):
    return factored_gradient(policy, outer_rollouts(policy, family, tasks, seed, round_id,
                                                    n_traj, horizon))


def objective_gradient(policy, family, tasks, cfg, round_id):
    if cfg.objective == 'maml':
        return meta_gradient(policy, family, tasks, cfg.inner_lr, cfg.seed, round_id, cfg.batch,
                             cfg.horizon)
    if cfg.objective == 'multi-task':
        return multi_task_gradient(policy, family, tasks, cfg.seed, round_id, cfg.batch,
                                   cfg.horizon)
    raise ContractError(f"unknown meta objective '{cfg.objective}'")


def evaluate_tasks(policy, family, tasks, horizon=None, inner_lr=0.0, seed=0, n_traj=20,
                   round_id=0):
    """Mean discounted return of noiseless rollouts over tasks, optionally after one adaptation."""
    horizon = horizon or family.horizon
    scores = []
    for task, occurrence in _keyed(tasks):
        target = policy
        if inner_lr != 0.0:
            target = adapted_copy(policy, adapt(policy, family, task, inner_lr, seed, round_id,
                                                n_traj, horizon, occurrence))
        env = family.env(task)
        rollouts = collect(target, env, task, 1, horizon, None, deterministic=True)
        scores.append(rollouts.discounted_returns(env.gamma)[0])
    return float(np.mean(scores))


def grad_noise_harness(policy, family, cfg, n_repeats=None, round_id=0):
    """Spread of post-update performance over independent single updates.

    Each repeat samples fresh trajectories, takes one gradient step of size
    harness_lr, evaluates the mean noiseless return over the test tasks and
    restores the parameters. std and cov are None when n_repeats < 2.
    """
    n_repeats = cfg.harness_repeats if n_repeats is None else n_repeats
    phi0 = flat_params(policy).copy()
    tasks = family.sample(cfg.meta_batch, make_rng(cfg.seed, 91, round_id))
    scores = []
    try:
        for r in range(n_repeats):
            g = objective_gradient(policy, family, tasks, cfg, round_id=10_000 + 1_000 * round_id + r)
            set_flat_params(policy, phi0 + cfg.harness_lr * g)
            scores.append(evaluate_tasks(policy, family, family.test, cfg.horizon))
            set_flat_params(policy, phi0)
    finally:
        set_flat_params(policy, phi0)
    scores = np.asarray(scores)
    mean = float(scores.mean()) if scores.size else float('nan')
    if scores.size < 2:
        return {'mean_return': mean, 'std_return': None, 'var_return': None, 'cov': None}
    std = float(scores.std(ddof=1))
    return {'mean_return': mean, 'std_return': std, 'var_return': std ** 2,
            'cov': std / abs(mean) if mean != 0.0 else float('inf')}


def meta_train(policy, family, cfg, checkpoint_dir=None, on_checkpoint=None):
    """Outer Adam ascent on the configured objective; one metrics row per checkpoint iteration."""
    optimizer = Adam(policy.parameters(), lr=cfg.outer_lr)
    checkpoints = set(cfg.checkpoints)
    rows = []
    for it in range(1, cfg.iterations + 1):
        tasks = family.sample(cfg.meta_batch, make_rng(cfg.seed, 71, it))
        g = objective_gradient(policy, family, tasks, cfg, round_id=it)
        offset = 0
        for p in policy.parameters():
            p.grad = g[offset:offset + p.size].reshape(p.shape)
            offset += p.size
        optimizer.step(ascent=True)
        if it in checkpoints:
            adapt_lr = cfg.inner_lr if cfg.objective == 'maml' else 0.0
            row = {
                'iteration': it,
                'model_kind': policy.kind,
                'objective': cfg.objective,
                'train_pre': evaluate_tasks(policy, family, family.train[:cfg.n_test_tasks],
                                            cfg.horizon),
                'train_post': evaluate_tasks(policy, family, family.train[:cfg.n_test_tasks],
                                             cfg.horizon, adapt_lr, cfg.seed, cfg.batch, it),
                'test_pre': evaluate_tasks(policy, family, family.test, cfg.horizon),
                'test_post': evaluate_tasks(policy, family, family.test, cfg.horizon, adapt_lr,
                                            cfg.seed, cfg.batch, it)
            }
            rows.append(row)
            logger.info("iteration %d: test return %.4f -> %.4f after adaptation", it,
                        row['test_pre'], row['test_post'])
            if checkpoint_dir is not None:
                save_modules({'policy': policy},
                             os.path.join(checkpoint_dir, f"iter_{it:05d}.ckpt"))
            if on_checkpoint is not None:
                on_checkpoint(it, policy)
    return rows
