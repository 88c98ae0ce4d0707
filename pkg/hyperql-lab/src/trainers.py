# src/trainers.py
"""
Off-policy actor-critic loops (TD3-style and SAC-style).

Each environment step stores a transition; once warmup is over every step
runs one twin-critic regression toward the bootstrapped target, and every
`policy_delay` steps one actor ascent through the frozen first critic plus a
soft update of the target networks.
"""
import logging
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .checkpoint import save_modules
from .critics import make_critic
from .environments import rollout
from .errors import DivergenceError
from .optim import Adam, soft_update
from .policies import Policy
from .replay_buffer import ReplayBuffer
from .tensor_core import backward, mean, square, tsum
from .utils import LabConfig, make_rng

logger = logging.getLogger(__name__)

HYPER_CRITICS = ('sa-hyper', 'as-hyper')
ALGOS = ('td3', 'sac')


@dataclass
class TrainerConfig:
    algo: str = 'td3'
    critic: str = 'sa-hyper'
    policy: str = 'deterministic-tanh'
    actor_lr: float = 3e-4
    critic_lr: Optional[float] = None
    batch: int = 100
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    exploration_std: float = 0.1
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    entropy_weight: float = 0.2
    reward_scale: float = 1.0
    total_steps: int = 20000
    warmup: int = 1000
    eval_every: int = 5000
    eval_episodes: int = 10
    buffer_capacity: int = 1_000_000
    mlp_kind: str = 'standard'
    policy_hidden: tuple = LabConfig.MLP_HIDDEN['standard']
    widths: tuple = LabConfig.DESK_WIDTHS
    init_scheme: str = 'small_heads'
    seed: int = 0

    @classmethod
    def td3(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def sac(cls, **overrides):
        params = dict(algo='sac', policy='gaussian-reparam', batch=256, reward_scale=5.0,
                      policy_delay=1)
        params.update(overrides)
        return cls(**params)

    def resolved_critic_lr(self):
        if self.critic_lr is not None:
            return self.critic_lr
        return 5e-5 if self.critic in HYPER_CRITICS else 3e-4

    def to_dict(self):
        return asdict(self)


def td_targets(cfg, target_critics, target_policy, batch, rng):
    """y = scale * r + gamma * (min_k Q_k'(s', a') [- alpha log pi(a'|s')]); time limits bootstrap."""
    s2 = batch['s2']
    if cfg.algo == 'sac':
        eps = rng.standard_normal((s2.shape[0], target_policy.n_a))
        with target_policy.frozen():
            a2, logp2 = target_policy(s2, eps)
        a2, entropy_term = a2.data, cfg.entropy_weight * logp2.data
    else:
        with target_policy.frozen():
            a2, _ = target_policy(s2)
        noise = np.clip(cfg.target_noise * rng.standard_normal(a2.shape),
                        -cfg.target_noise_clip, cfg.target_noise_clip)
        bound = target_policy.action_bound
        a2 = np.clip(a2.data + noise, -bound, bound)
        entropy_term = 0.0
    q_next = np.minimum(*[_q_rows(c, s2, a2) for c in target_critics])
    return cfg.reward_scale * batch['r'] + cfg.gamma * (q_next - entropy_term)


def _q_rows(critic, s, a):
    with critic.frozen():
        return critic(s, a).data[:, 0]


def td_loss(critics, batch, y):
    """(sum of the critics' MSE as a tensor, mean of their MSE as a float)."""
    losses = [mean(square(tsum(c(batch['s'], batch['a']), axis=1) - y)) for c in critics]
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total, float(np.mean([loss.item() for loss in losses]))


def critic_update(cfg, critics, target_critics, target_policy, batch, optimizer, rng, step=0):
    """One descent step of the twin critics; targets are read, never written. Returns the TD loss."""
    y = td_targets(cfg, target_critics, target_policy, batch, rng)
    optimizer.zero_grad()
    total, reported = td_loss(critics, batch, y)
    if not np.isfinite(reported):
        raise DivergenceError(step, f"TD loss is {reported} at step {step}")
    backward(total)
    optimizer.step()
    return reported


def actor_loss(cfg, critic, policy, batch, rng):
    """Negated surrogate: -mean Q(s, mu(eps|s)) (+ alpha mean log pi for SAC)."""
    s = batch['s']
    eps = rng.standard_normal((s.shape[0], policy.n_a)) if policy.stochastic else None
    a, logp = policy(s, eps)
    q = tsum(critic(s, a), axis=1)
    if cfg.algo == 'sac' and logp is not None:
        return mean(cfg.entropy_weight * logp - q)
    return -mean(q)


def actor_update(cfg, critic, policy, batch, optimizer, rng):
    """One ascent step of the policy through the frozen critic; returns the surrogate value."""
    optimizer.zero_grad()
    with critic.frozen():
        loss = actor_loss(cfg, critic, policy, batch, rng)
        backward(loss)
    optimizer.step()
    return -loss.item()


def evaluate_policy(env, policy, episodes, seed, round_id=0):
    """Mean and std of discounted returns of noiseless-policy rollouts."""
    returns = [rollout(env, policy, seed=seed, stream=10_000 + 100 * round_id + k,
                       deterministic=True).discounted_return()
               for k in range(episodes)]
    return float(np.mean(returns)), float(np.std(returns))


class ActorCriticTrainer:
    """Holds the actor, twin critics, their targets, optimizers and the replay buffer."""

    def __init__(self, cfg, env):
        self.cfg = cfg
        self.env = env
        seed = cfg.seed
        self.policy = Policy(env.n_s, env.n_a, cfg.policy, cfg.policy_hidden,
                             action_bound=env.action_bound, seed=seed)
        self.critics = [make_critic(cfg.critic, env.n_s, env.n_a, seed=seed + 101 * k,
                                    mlp_kind=cfg.mlp_kind, widths=cfg.widths,
                                    scheme=cfg.init_scheme)
                        for k in range(2)]
        self.target_critics = [c.copy() for c in self.critics]
        # TD3 bootstraps through a lagging actor; SAC samples from the online one
        self.target_policy = self.policy.copy() if cfg.algo == 'td3' else self.policy
        self.actor_opt = Adam(self.policy.parameters(), lr=cfg.actor_lr)
        self.critic_opt = Adam([p for c in self.critics for p in c.parameters()],
                               lr=cfg.resolved_critic_lr())
        self.buffer = ReplayBuffer(min(cfg.buffer_capacity, max(cfg.total_steps, 1)),
                                   env.n_s, env.n_a, seed=seed)
        self.explore_rng = make_rng(seed, 41)
        self.update_rng = make_rng(seed, 42)
        self.step = 0
        self.td_losses = []
        self.surrogates = []
        self.cs_rows = []

    def collect(self, s, t):
        env, cfg = self.env, self.cfg
        bound = env.action_bound
        if self.step < cfg.warmup:
            a = self.explore_rng.uniform(-bound, bound, size=env.n_a)
        elif self.policy.stochastic:
            a = self.policy.act(s, self.explore_rng)
        else:
            a = self.policy.act(s, deterministic=True)
            a = np.clip(a + cfg.exploration_std * bound * self.explore_rng.standard_normal(env.n_a),
                        -bound, bound)
        s2, r = env.step(s, a, self.explore_rng)
        if not np.all(np.isfinite(s2)):
            raise DivergenceError(self.step, f"non-finite state at step {self.step}")
        self.buffer.add(s, a, r, s2, t == env.horizon - 1)
        return s2

    def learn(self):
        cfg = self.cfg
        batch = self.buffer.sample(cfg.batch, allow_underfull=True)
        self.td_losses.append(critic_update(cfg, self.critics, self.target_critics,
                                            self.target_policy, batch, self.critic_opt,
                                            self.update_rng, self.step))
        if self.step % cfg.policy_delay == 0:
            self.surrogates.append(actor_update(cfg, self.critics[0], self.policy, batch,
                                                self.actor_opt, self.update_rng))
            for target, online in zip(self.target_critics, self.critics):
                soft_update(target, online, cfg.tau)
            if self.target_policy is not self.policy:
                soft_update(self.target_policy, self.policy, cfg.tau)

    def eval_row(self, round_id):
        mean_ret, std_ret = evaluate_policy(self.env, self.policy, self.cfg.eval_episodes,
                                            self.cfg.seed, round_id)
        row = {
            'step': self.step,
            'eval_return_mean': mean_ret,
            'eval_return_std': std_ret,
            'td_loss': float(np.mean(self.td_losses)) if self.td_losses else float('nan'),
            'surrogate': float(np.mean(self.surrogates)) if self.surrogates else float('nan')
        }
        self.td_losses, self.surrogates = [], []
        return row

    def modules(self):
        return {'actor': self.policy, 'critic1': self.critics[0], 'critic2': self.critics[1]}

    def run(self, checkpoint_dir=None, cs_hook=None, cs_every=None):
        """Train for cfg.total_steps environment steps; returns the evaluation rows."""
        cfg = self.cfg
        rows = []
        s = self.env.reset(self.explore_rng)
        t = 0
        while self.step < cfg.total_steps:
            s = self.collect(s, t)
            t += 1
            if t == self.env.horizon:
                s, t = self.env.reset(self.explore_rng), 0
            if self.step >= cfg.warmup:
                self.learn()
            self.step += 1
            if cs_hook is not None and cs_every and self.step % cs_every == 0:
                self.cs_rows.extend(cs_hook(self.step, self))
            if self.step % cfg.eval_every == 0:
                row = self.eval_row(self.step // cfg.eval_every)
                rows.append(row)
                logger.info("step %d: eval return %.4f (std %.4f), td loss %.4g",
                            row['step'], row['eval_return_mean'], row['eval_return_std'],
                            row['td_loss'])
                if checkpoint_dir is not None:
                    save_modules(self.modules(),
                                 os.path.join(checkpoint_dir, f"step_{self.step:07d}.ckpt"))
        return rows


def train(cfg, env, critic_kind=None, policy_kind=None, checkpoint_dir=None, cs_hook=None,
          cs_every=None):
    """Run one training job; returns (eval rows, trainer)."""
    if critic_kind is not None:
        cfg.critic = critic_kind
    if policy_kind is not None:
        cfg.policy = policy_kind
    trainer = ActorCriticTrainer(cfg, env)
    logger.info("training %s with %s critic for %d steps (seed %d)", cfg.algo, cfg.critic,
                cfg.total_steps, cfg.seed)
    rows = trainer.run(checkpoint_dir=checkpoint_dir, cs_hook=cs_hook, cs_every=cs_every)
    return rows, trainer
