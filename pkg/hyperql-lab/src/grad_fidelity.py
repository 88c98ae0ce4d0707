# src/grad_fidelity.py
"""
Direction-only agreement between a critic's action gradient and a
non-parametric estimate of the true one.

The estimate comes from a least-squares fit to returns of rollouts whose first
action is perturbed around the policy mean: every ordered pair (i, j) of
samples contributes one row a_j - a_i with target q_j - q_i.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import statsmodels.api as sm

from .critics import action_grad_autodiff, q_value
from .environments import rollout_returns
from .errors import DegenerateDesignError, DimensionError
from .replay_buffer import ReplayBuffer
from .utils import LabConfig, make_rng

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass
class CsProtocol:
    eval_every: int = 10_000
    n_states: int = 15
    n_rollouts: int = 15
    sigma: float = 0.3
    thresholds: tuple = LabConfig.CS_THRESHOLDS
    horizon: int = 400
    ridge: Optional[float] = 1e-10
    cond_limit: float = 1e10
    seed: int = 0


def pairwise_design(actions, q):
    """(X, delta) with rows a_j - a_i and q_j - q_i over all N^2 ordered pairs."""
    actions = np.asarray(actions, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if actions.ndim != 2 or q.shape != (actions.shape[0],):
        raise DimensionError(f"actions {actions.shape} and returns {q.shape} do not pair up")
    X = (actions[None, :, :] - actions[:, None, :]).reshape(-1, actions.shape[1])
    delta = (q[None, :] - q[:, None]).ravel()
    return X, delta


def lmse_fit(center, actions, q, ridge=1e-10, cond_limit=1e10):
    """Least-squares gradient g* = (X'X)^-1 X'delta around `center`.

    Falls back to a Tikhonov ridge when X'X is rank deficient or badly
    conditioned; with ridge None such designs raise DegenerateDesignError.
    """
    center = np.asarray(center, dtype=np.float64).ravel()
    X, delta = pairwise_design(actions, q)
    if X.shape[1] != center.size:
        raise DimensionError(f"center {center.shape} vs action samples {X.shape}")
    gram = X.T @ X
    rhs = X.T @ delta
    rank = np.linalg.matrix_rank(X)
    cond = np.linalg.cond(gram) if rank == X.shape[1] else np.inf
    if rank < X.shape[1] or cond > cond_limit:
        if ridge is None:
            raise DegenerateDesignError(
                f"pairwise design has rank {rank} of {X.shape[1]} (condition {cond:.3g})")
        logger.warning("LMSE design near singular (rank %d, condition %.3g); ridge %.1e applied",
                       rank, cond, ridge)
        gram = gram + ridge * np.eye(gram.shape[0])
    return scipy.linalg.solve(gram, rhs, assume_a='pos')


def local_linear_r2(actions, q):
    """R^2 of an ordinary least-squares linear model q ~ 1 + a."""
    model = sm.OLS(np.asarray(q, dtype=np.float64),
                   sm.add_constant(np.asarray(actions, dtype=np.float64), has_constant='add'))
    return float(model.fit().rsquared)


def cosine_similarity(u, v):
    """Cosine of the angle between u and v; nan when either norm is at most 1e-12."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= NORM_FLOOR or nv <= NORM_FLOOR:
        return float('nan')
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def perturbed_actions(center, sigma, n, rng):
    center = np.asarray(center, dtype=np.float64).ravel()
    return center + sigma * rng.standard_normal((n, center.size))


def estimate_true_gradient(env, policy, s, protocol, rng):
    """(a_mu, g*, sampled actions, returns) for one state."""
    a_mu = np.asarray(policy.mean_action(s), dtype=np.float64).ravel()
    actions = perturbed_actions(a_mu, protocol.sigma, protocol.n_rollouts, rng)
    starts = np.repeat(np.asarray(s, dtype=np.float64).reshape(1, -1), protocol.n_rollouts, axis=0)
    returns = rollout_returns(env, policy, starts, actions, protocol.horizon, env.gamma, rng)
    return a_mu, lmse_fit(a_mu, actions, returns, protocol.ridge, protocol.cond_limit), actions, returns


def summarize_cs(values, thresholds):
    """mean CS over defined states, undefined fraction and learnable fraction per threshold."""
    values = np.asarray(values, dtype=np.float64)
    defined = ~np.isnan(values)
    n = max(values.size, 1)
    summary = {
        'mean_cs': float(values[defined].mean()) if defined.any() else float('nan'),
        'undefined_frac': float((~defined).sum() / n)
    }
    for tau in thresholds:
        summary[f'learnable_frac@{tau:g}'] = float((values[defined] > tau).sum() / n)
    return summary


def _draw_states(source, n, rng):
    states = source.states() if isinstance(source, ReplayBuffer) else np.asarray(source)
    if len(states) == 0:
        raise DimensionError("no states available for the CS sweep")
    return states[rng.integers(0, len(states), size=n)]


def cs_sweep(protocol, env, critic, policy, state_source, step=0):
    """One evaluation round: per-state CS rows sharing the round summary."""
    rng = make_rng(protocol.seed, 51, step)
    states = _draw_states(state_source, protocol.n_states, rng)
    values = []
    for idx, s in enumerate(states):
        state_rng = make_rng(protocol.seed, 52, step, idx)
        a_mu, g_star, _, _ = estimate_true_gradient(env, policy, s, protocol, state_rng)
        values.append(cosine_similarity(action_grad_autodiff(critic, s, a_mu), g_star))
    summary = summarize_cs(values, protocol.thresholds)
    if summary['undefined_frac'] > 0:
        logger.warning("step %d: CS undefined for %.0f%% of states", step,
                       100 * summary['undefined_frac'])
    logger.info("step %d: mean CS %.4f over %d states", step, summary['mean_cs'], len(values))
    return [dict({'step': step, 'state_idx': idx, 'cs': cs}, **summary)
            for idx, cs in enumerate(values)]


def local_linearity_check(critic, protocol, states, centers, seed=0):
    """CS between the LMSE fit of the critic's own outputs and its parametric gradient.

    High values certify that the network is close to linear at the
    perturbation scale; r2 is the OLS fit quality of the same samples.
    """
    rows = []
    for idx, (s, a_mu) in enumerate(zip(np.atleast_2d(states), np.atleast_2d(centers))):
        rng = make_rng(seed, 53, idx)
        actions = perturbed_actions(a_mu, protocol.sigma, protocol.n_rollouts, rng)
        q = q_value(critic, np.repeat(s.reshape(1, -1), len(actions), axis=0), actions)
        g_star = lmse_fit(a_mu, actions, q, protocol.ridge, protocol.cond_limit)
        rows.append({
            'state_idx': idx,
            'cs': cosine_similarity(action_grad_autodiff(critic, s, a_mu), g_star),
            'r2': local_linear_r2(actions, q)
        })
    return rows


def make_cs_hook(protocol, env):
    """Callback for the trainer: sweep the first online critic against the current actor."""
    def hook(step, trainer):
        return cs_sweep(protocol, env, trainer.critics[0], trainer.policy, trainer.buffer, step)
    return hook
