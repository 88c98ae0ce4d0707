# src/critics.py
"""
Q-function compositions and their action gradients.

- LinearCritic: Q = w_s . s + w_a . a + b; the action gradient is w_a everywhere.
- MlpConcatCritic: ReLU MLP on [s, a].
- SAHyperCritic: the state drives the primary network, the action is the dynamic input.
- ASHyperCritic: the action drives the primary network, the state is the dynamic input.
- LqrOracleCritic: the exact Q^pi of a linear policy on an LQR instance.

Closed-form gradients multiply layer matrices and ReLU masks from the last
forward pass; they must agree with reverse mode to rounding error.
"""
import logging

import numpy as np
from scipy.linalg import svdvals

from .environments import LqrOracle
from .errors import ContractError, DimensionError
from .hypernet import DynamicSpec, HyperNet, InitScheme, dynamic_forward
from .networks import MLP, Linear, Module
from .tensor_core import Tensor, as_tensor, backward, concat, tsum
from .utils import LabConfig, make_rng

logger = logging.getLogger(__name__)


def _rows(x):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return x.reshape(1, -1) if x.ndim == 1 else x


def _batch(x):
    x = as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


class Critic(Module):
    kind = None

    def __init__(self, n_s, n_a):
        super().__init__()
        self.n_s = n_s
        self.n_a = n_a

    def _check(self, s, a):
        if s.shape[1] != self.n_s or a.shape[1] != self.n_a:
            raise DimensionError(
                f"{self.kind} critic expects state dim {self.n_s} and action dim {self.n_a}, "
                f"got {s.shape} and {a.shape}")
        if s.shape[0] != a.shape[0]:
            raise DimensionError(f"state batch {s.shape} vs action batch {a.shape}")


class LinearCritic(Critic):
    kind = 'linear'

    def __init__(self, n_s, n_a, seed=0):
        super().__init__(n_s, n_a)
        self.linear = self.add_module('linear', Linear(n_s + n_a, 1, make_rng(seed, 31)))

    @property
    def w_s(self):
        return self.linear.weight.data[:self.n_s, 0]

    @property
    def w_a(self):
        return self.linear.weight.data[self.n_s:, 0]

    def forward(self, s, a):
        s, a = _batch(s), _batch(a)
        self._check(s, a)
        return self.linear(concat([s, a], axis=-1))


class MlpConcatCritic(Critic):
    kind = 'mlp-concat'

    def __init__(self, n_s, n_a, hidden=LabConfig.MLP_HIDDEN['standard'], seed=0):
        super().__init__(n_s, n_a)
        self.mlp = self.add_module('mlp', MLP(n_s + n_a, hidden, 1, make_rng(seed, 32)))

    def forward(self, s, a):
        s, a = _batch(s), _batch(a)
        self._check(s, a)
        self.last_rows = s.shape[0]
        return self.mlp(concat([s, a], axis=-1))

    def closed_form_grad(self):
        """dQ/da = W0_a diag(m0) W1 diag(m1) ... W_L, from the masks of the last forward."""
        layers = self.mlp.layers
        masks = self.mlp.last_masks
        if not masks:
            return np.tile(layers[0].weight.data[self.n_s:, 0], (self.last_rows, 1))
        g = masks[-1] * layers[-1].weight.data[:, 0]
        for layer, mask in zip(reversed(layers[1:-1]), reversed(masks[:-1])):
            g = (g @ layer.weight.data.T) * mask
        return g @ layers[0].weight.data[self.n_s:].T


class _HyperCritic(Critic):
    meta = None

    def __init__(self, n_s, n_a, widths=LabConfig.DESK_WIDTHS, scheme=None, seed=0,
                 hidden_dim=LabConfig.DYNAMIC_HIDDEN, gains=True):
        super().__init__(n_s, n_a)
        meta_dim, base_dim = (n_s, n_a) if self.meta == 'state' else (n_a, n_s)
        self.spec = DynamicSpec(base_dim, 1, hidden_dim, gains=gains)
        self.hyper = self.add_module('hyper', HyperNet(meta_dim, self.spec, widths,
                                                       scheme or InitScheme.small_heads(), seed))
        self.last_cache = {}
        self.last_weights = None

    @property
    def primary(self):
        return self.hyper.primary

    def split(self, s, a):
        return (s, a) if self.meta == 'state' else (a, s)

    def forward(self, s, a):
        s, a = _batch(s), _batch(a)
        self._check(s, a)
        z, x = self.split(s, a)
        self.last_weights = self.primary(z)
        self.last_cache = {}
        return dynamic_forward(self.last_weights, x, cache=self.last_cache)


class SAHyperCritic(_HyperCritic):
    kind = 'sa-hyper'
    meta = 'state'

    def closed_form_grad(self):
        """dQ/da = W1(s) diag((1+g1) m1) W2(s) (1+g2); no derivative flows through the primary."""
        w = self.last_weights
        out_col = w.w2.data[:, :, 0]
        if w.g2 is not None:
            out_col = out_col * (1.0 + w.g2.data[:, :1])
        hidden = out_col * self.last_cache['mask1']
        if w.g1 is not None:
            hidden = hidden * (1.0 + w.g1.data)
        return np.einsum('bij,bj->bi', w.w1.data, hidden)


class ASHyperCritic(_HyperCritic):
    kind = 'as-hyper'
    meta = 'action'

    def weight_jacobian(self, a):
        """d w(a) / d a as an [n_w x n_a] matrix for a single action."""
        a = np.asarray(a, dtype=np.float64).reshape(1, -1)
        d = self.primary.latent_dim
        # row i of the repeated input only feeds latent unit i into the loss
        leaf = Tensor(np.repeat(a, d, axis=0), requires_grad=True)
        with self.primary.frozen():
            latent = self.primary.latent(leaf)
        backward(tsum(latent * np.eye(d)))
        rows = np.zeros((d, self.n_a)) if leaf.grad is None else leaf.grad
        heads = np.concatenate([head.weight.data for head in self.primary.heads.values()], axis=1)
        return heads.T @ rows


def as_hyper_jacobian_rank(c, a, rtol=1e-10):
    """Numerical rank of the action-to-dynamic-weights Jacobian of an AS-Hyper critic."""
    if not isinstance(c, ASHyperCritic):
        raise ContractError(f"jacobian rank needs an as-hyper critic, got {type(c).__name__}")
    singular = svdvals(c.weight_jacobian(a))
    if singular.size == 0 or singular[0] <= 0.0:
        return 0
    return int(np.sum(singular > rtol * singular[0]))


class LqrOracleCritic(Critic):
    """Analytic Q^pi; same calling convention as the learned critics, no parameters."""
    kind = 'lqr-oracle'

    def __init__(self, env, K):
        super().__init__(env.n_s, env.n_a)
        self.oracle = LqrOracle(env, K)

    def forward(self, s, a):
        s, a = _rows(s), _rows(a)
        self._check(s, a)
        return Tensor(self.oracle.q_value(s, a).reshape(-1, 1))

    def closed_form_grad_at(self, s, a):
        return self.oracle.action_grad(_rows(s), _rows(a))


CRITIC_KINDS = {
    'linear': LinearCritic,
    'mlp-concat': MlpConcatCritic,
    'sa-hyper': SAHyperCritic,
    'as-hyper': ASHyperCritic
}


def make_critic(kind, n_s, n_a, seed=0, mlp_kind='standard', widths=LabConfig.DESK_WIDTHS,
                scheme='small_heads'):
    if kind not in CRITIC_KINDS:
        raise ContractError(f"unknown critic kind '{kind}'")
    if kind == 'linear':
        return LinearCritic(n_s, n_a, seed)
    if kind == 'mlp-concat':
        return MlpConcatCritic(n_s, n_a, LabConfig.MLP_HIDDEN[mlp_kind], seed)
    return CRITIC_KINDS[kind](n_s, n_a, widths, InitScheme.by_name(scheme), seed)


def q_value(c, s, a):
    """Q for one (s, a) pair (float) or a batch of rows ([B] array)."""
    single = np.ndim(s) == 1
    with c.frozen():
        q = c(_rows(s), _rows(a)).data[:, 0]
    return float(q[0]) if single else q


def action_grad_autodiff(c, s, a):
    """Reverse-mode dQ/da with the state and critic parameters held constant."""
    single = np.ndim(a) == 1
    if isinstance(c, LqrOracleCritic):
        g = c.closed_form_grad_at(s, a)
        return g[0] if single else g
    leaf = Tensor(_rows(a), requires_grad=True)
    with c.frozen():
        q = c(_rows(s), leaf)
    # rows are independent, so the gradient of the sum is the per-row gradient
    backward(tsum(q))
    grad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    return grad[0] if single else grad


def action_grad_closed_form(c, s, a):
    single = np.ndim(a) == 1
    if isinstance(c, LinearCritic):
        g = np.broadcast_to(c.w_a, _rows(a).shape).copy()
    elif isinstance(c, (MlpConcatCritic, SAHyperCritic)):
        with c.frozen():
            c(_rows(s), _rows(a))
        g = c.closed_form_grad()
    elif isinstance(c, LqrOracleCritic):
        g = c.closed_form_grad_at(s, a)
    else:
        raise ContractError(f"no closed-form action gradient for critic kind '{c.kind}'")
    return g[0] if single else g
