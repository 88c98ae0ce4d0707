# src/policies.py
import numpy as np

from .errors import ContractError
from .networks import MLP, Module
from .tensor_core import as_tensor, clip, exp, log, slice_last, tanh, tsum
from .utils import LabConfig, make_rng

LOG_2PI = np.log(2.0 * np.pi)


def gaussian_log_prob(eps, log_std):
    """Per-row log N(mu + std*eps; mu, std) summed over action dims, as a [B] tensor."""
    eps = as_tensor(eps)
    return tsum(-0.5 * eps * eps - log_std - 0.5 * LOG_2PI, axis=1)


class Policy(Module):
    """Actor mu_phi(eps | s) over an MLP trunk.

    'deterministic-tanh': a = bound * tanh(net(s)); eps is ignored.
    'gaussian-reparam': a = bound * tanh(mu + exp(log_std) * eps) with eps ~ N(0, I).
    """
    KINDS = ('deterministic-tanh', 'gaussian-reparam')

    def __init__(self, n_s, n_a, kind='deterministic-tanh', hidden=LabConfig.MLP_HIDDEN['standard'],
                 action_bound=1.0, seed=0, log_std_bounds=(-5.0, 2.0)):
        super().__init__()
        if kind not in self.KINDS:
            raise ContractError(f"unknown policy kind '{kind}'")
        self.n_s = n_s
        self.n_a = n_a
        self.kind = kind
        self.action_bound = float(action_bound)
        self.log_std_bounds = log_std_bounds
        out_dim = n_a if kind == 'deterministic-tanh' else 2 * n_a
        self.net = self.add_module('net', MLP(n_s, hidden, out_dim, make_rng(seed, 21)))

    @property
    def stochastic(self):
        return self.kind == 'gaussian-reparam'

    def forward(self, s, eps=None):
        """(action [B x n_a], log-prob [B] or None) for a batch of states."""
        s = as_tensor(s)
        if s.ndim == 1:
            s = s.reshape(1, -1)
        out = self.net(s)
        if not self.stochastic:
            return self.action_bound * tanh(out), None
        mu = slice_last(out, 0, self.n_a)
        log_std = clip(slice_last(out, self.n_a, 2 * self.n_a), *self.log_std_bounds)
        if eps is None:
            eps = np.zeros((s.shape[0], self.n_a))
        u = mu + exp(log_std) * eps
        t = tanh(u)
        squash = tsum(log(self.action_bound * (1.0 - t * t) + 1e-6), axis=1)
        return self.action_bound * t, gaussian_log_prob(eps, log_std) - squash

    def act(self, s, rng=None, deterministic=False):
        s = np.asarray(s, dtype=np.float64)
        single = s.ndim == 1
        eps = None
        if self.stochastic and not deterministic and rng is not None:
            eps = rng.standard_normal((1 if single else s.shape[0], self.n_a))
        a, _ = self.forward(np.atleast_2d(s), eps)
        return a.data[0] if single else a.data

    def mean_action(self, s):
        return self.act(s, deterministic=True)


class LinearPolicy:
    """a = K s, optionally with Gaussian exploration noise."""

    def __init__(self, K, noise_std=0.0):
        self.K = np.asarray(K, dtype=np.float64)
        self.noise_std = noise_std

    def act(self, s, rng=None, deterministic=False):
        a = np.asarray(s, dtype=np.float64) @ self.K.T
        if self.noise_std > 0 and rng is not None and not deterministic:
            a = a + self.noise_std * rng.standard_normal(a.shape)
        return a

    def mean_action(self, s):
        return self.act(s, deterministic=True)


class ZeroPolicy(LinearPolicy):
    def __init__(self, n_s, n_a):
        super().__init__(np.zeros((n_a, n_s)))
