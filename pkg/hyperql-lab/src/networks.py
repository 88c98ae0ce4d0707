# src/networks.py
import copy
from collections import OrderedDict
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError
from .tensor_core import Tensor, as_tensor, relu
from .utils import LabConfig


def kaiming_uniform_bound(fan_in, gain):
    """Fan-in Kaiming uniform: U(-b, b) with b = gain * sqrt(3 / fan_in)."""
    return gain * np.sqrt(3.0 / fan_in)


def default_uniform_bound(fan_in):
    """Bound used by the usual framework default for linear layers."""
    return 1.0 / np.sqrt(fan_in)


class Module:
    """Named-parameter container; parameters are leaf tensors in declaration order."""

    def __init__(self):
        self._params = OrderedDict()
        self._modules = OrderedDict()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def add_param(self, name, data):
        param = Tensor(data, requires_grad=True, name=name)
        self._params[name] = param
        return param

    def add_module(self, name, module):
        self._modules[name] = module
        return module

    def named_parameters(self, prefix=''):
        for name, param in self._params.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + '.')

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    @contextmanager
    def frozen(self):
        """Stop gradient accumulation into this module's parameters for the duration."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(params, flags):
                p.requires_grad = flag

    def state_dict(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state):
        own = OrderedDict(self.named_parameters())
        for name in own:
            if name not in state:
                raise ContractError(f"missing tensor '{name}' in state")
        for name, param in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DimensionError(
                    f"tensor '{name}' has shape {value.shape}, expected {param.shape}")
            param.data[...] = value

    def copy(self):
        return copy.deepcopy(self)


def flat_params(module):
    return np.concatenate([p.data.ravel() for p in module.parameters()])


def set_flat_params(module, vector):
    vector = np.asarray(vector, dtype=np.float64)
    if vector.size != module.num_parameters():
        raise DimensionError(
            f"flat vector has {vector.size} entries, module has {module.num_parameters()}")
    offset = 0
    for p in module.parameters():
        p.data[...] = vector[offset:offset + p.size].reshape(p.shape)
        offset += p.size


def flat_grad(module):
    return np.concatenate([
        np.zeros(p.size) if p.grad is None else p.grad.ravel()
        for p in module.parameters()
    ])


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, weight_bound=None, bias_bound=None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        wb = default_uniform_bound(in_dim) if weight_bound is None else weight_bound
        bb = default_uniform_bound(in_dim) if bias_bound is None else bias_bound
        self.weight = self.add_param('weight', rng.uniform(-wb, wb, size=(in_dim, out_dim)))
        self.bias = self.add_param('bias', rng.uniform(-bb, bb, size=(out_dim,)) if bb > 0
                                   else np.zeros(out_dim))

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"linear input shape {x.shape} vs weight {self.weight.shape}")
        return x @ self.weight + self.bias


class MLP(Module):
    """ReLU multilayer perceptron; the output layer is linear.

    The last forward's activation masks (1 where the pre-activation is
    positive) are kept in `last_masks`, one [B x width] array per hidden layer.
    """

    def __init__(self, in_dim, hidden, out_dim, rng, weight_gain=None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(hidden)
        self.layers = []
        dims = (in_dim,) + self.hidden + (out_dim,)
        for i in range(len(dims) - 1):
            bound = None if weight_gain is None else kaiming_uniform_bound(dims[i], weight_gain)
            self.layers.append(self.add_module(f'l{i}', Linear(dims[i], dims[i + 1], rng,
                                                               weight_bound=bound)))
        self.last_masks = []

    @classmethod
    def from_kind(cls, kind, in_dim, out_dim, rng):
        if kind not in LabConfig.MLP_HIDDEN:
            raise ContractError(f"unknown MLP kind '{kind}'")
        return cls(in_dim, LabConfig.MLP_HIDDEN[kind], out_dim, rng)

    def forward(self, x):
        h = as_tensor(x)
        masks = []
        for layer in self.layers[:-1]:
            z = layer(h)
            masks.append((z.data > 0).astype(np.float64))
            h = relu(z)
        self.last_masks = masks
        return self.layers[-1](h)
