# src/hypernet.py
"""
Hypernetwork: a primary network maps a meta-variable z to the weights of a
small dynamic network that is then applied to a base variable x.

The dynamic layer is (1 + g) * (x W) + b, with ReLU on the hidden layer only.
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError
from .networks import (MLP, Linear, Module, default_uniform_bound,
                       kaiming_uniform_bound)
from .tensor_core import Tensor, as_tensor, batched_vecmat, concat, relu
from .utils import LabConfig, make_rng

logger = logging.getLogger(__name__)

INIT_SCHEMES = ('small_heads', 'kaiming_default', 'torch_default')


@dataclass
class DynamicSpec:
    """Shape descriptor of the dynamic network (one hidden layer)."""
    in_dim: int
    out_dim: int
    hidden_dim: int = LabConfig.DYNAMIC_HIDDEN
    gains: bool = True
    std_head: bool = False

    def group_shapes(self):
        shapes = OrderedDict()
        shapes['w1'] = (self.in_dim, self.hidden_dim)
        shapes['b1'] = (self.hidden_dim,)
        if self.gains:
            shapes['g1'] = (self.hidden_dim,)
        shapes['w2'] = (self.hidden_dim, self.out_dim)
        shapes['b2'] = (self.out_dim,)
        if self.gains:
            shapes['g2'] = (self.out_dim,)
        if self.std_head:
            shapes['log_std'] = (self.out_dim,)
        return shapes

    def count(self):
        return int(sum(np.prod(s) for s in self.group_shapes().values()))

    @staticmethod
    def group_layer(name):
        if name == 'log_std':
            return 'log_std'
        return 'layer1' if name.endswith('1') else 'layer2'


@dataclass
class DynamicWeights:
    """Per-meta-input dynamic parameters; every tensor has a leading batch axis."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    g1: Optional[Tensor] = None
    g2: Optional[Tensor] = None
    log_std: Optional[Tensor] = None

    @property
    def batch(self):
        return self.w1.shape[0]

    def groups(self):
        out = OrderedDict()
        for name in ('w1', 'b1', 'g1', 'w2', 'b2', 'g2', 'log_std'):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def detached(self, requires_grad=False):
        """Copies as fresh leaves, optionally tracking gradients."""
        return DynamicWeights(**{name: Tensor(t.data, requires_grad=requires_grad)
                                 for name, t in self.groups().items()})

    def flat(self):
        """[B x n_w] numpy array in group order."""
        return np.concatenate([t.data.reshape(self.batch, -1) for t in self.groups().values()],
                              axis=1)


def dynamic_forward(w, x, cache=None):
    """hidden = ReLU((1+g1)*(x W1) + b1); out = (1+g2)*(hidden W2) + b2.

    If `cache` is a dict it receives the hidden activation mask under 'mask1'.
    """
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != w.w1.shape[1]:
        raise DimensionError(f"dynamic input shape {x.shape} vs W1 {w.w1.shape}")
    pre = batched_vecmat(x, w.w1)
    if w.g1 is not None:
        pre = (1.0 + w.g1) * pre
    pre = pre + w.b1
    if cache is not None:
        cache['mask1'] = (pre.data > 0).astype(np.float64)
    hidden = relu(pre)
    out = batched_vecmat(hidden, w.w2)
    if w.g2 is not None:
        out = (1.0 + w.g2) * out
    return out + w.b2


@dataclass
class InitScheme:
    """How primary blocks and heads are drawn.

    block_gain None means the framework-default bound 1/sqrt(fan_in);
    head_ranges maps dynamic layer -> fixed uniform half-width and takes
    precedence over head_gain.
    """
    name: str
    block_gain: Optional[float] = None
    head_ranges: Optional[dict] = None
    head_gain: Optional[float] = None
    zero_head_bias: bool = True

    @classmethod
    def small_heads(cls):
        return cls('small_heads', block_gain=LabConfig.BLOCK_GAIN,
                   head_ranges=dict(LabConfig.HEAD_RANGES), zero_head_bias=True)

    @classmethod
    def kaiming_default(cls):
        return cls('kaiming_default', block_gain=np.sqrt(2.0), head_gain=np.sqrt(2.0),
                   zero_head_bias=True)

    @classmethod
    def torch_default(cls):
        return cls('torch_default', zero_head_bias=False)

    @classmethod
    def by_name(cls, name):
        schemes = {'small_heads': cls.small_heads, 'kaiming_default': cls.kaiming_default,
                   'torch_default': cls.torch_default}
        if name not in schemes:
            raise ContractError(f"unknown init scheme '{name}'")
        return schemes[name]()

    def block_bound(self, fan_in):
        if self.block_gain is None:
            return default_uniform_bound(fan_in)
        return kaiming_uniform_bound(fan_in, self.block_gain)

    def head_bound(self, group, fan_in):
        if self.head_ranges is not None:
            return self.head_ranges[DynamicSpec.group_layer(group)]
        if self.head_gain is not None:
            return kaiming_uniform_bound(fan_in, self.head_gain)
        return default_uniform_bound(fan_in)


class ResidualBlock(Module):
    """Pre-activation block: h + L2(ReLU(L1(ReLU(h))))."""

    def __init__(self, width, rng):
        super().__init__()
        self.l1 = self.add_module('l1', Linear(width, width, rng))
        self.l2 = self.add_module('l2', Linear(width, width, rng))

    def forward(self, h):
        return h + self.l2(relu(self.l1(relu(h))))


class PrimaryNet(Module):
    """Up-scaling stages with residual blocks, then one linear head per dynamic group."""

    def __init__(self, meta_dim, spec, widths=LabConfig.DESK_WIDTHS, scheme=None, seed=0,
                 blocks_per_stage=2):
        super().__init__()
        self.meta_dim = meta_dim
        self.spec = spec
        self.widths = tuple(widths)
        rng = make_rng(seed)
        self.stages = []
        prev = meta_dim
        for i, width in enumerate(self.widths):
            up = self.add_module(f'up{i}', Linear(prev, width, rng))
            blocks = [self.add_module(f'res{i}_{j}', ResidualBlock(width, rng))
                      for j in range(blocks_per_stage)]
            self.stages.append((up, blocks))
            prev = width
        self.latent_dim = prev
        self.heads = OrderedDict()
        for group, shape in spec.group_shapes().items():
            self.heads[group] = self.add_module(f'head_{group}',
                                                Linear(prev, int(np.prod(shape)), rng))
        init(self, scheme or InitScheme.small_heads(), seed)

    @staticmethod
    def count_parameters(meta_dim, spec, widths, blocks_per_stage=2):
        blocks = 0
        prev = meta_dim
        for width in widths:
            blocks += prev * width + width
            blocks += blocks_per_stage * 2 * (width * width + width)
            prev = width
        heads = (prev + 1) * spec.count()
        return {'blocks': blocks, 'heads': heads, 'total': blocks + heads}

    def block_linears(self):
        for up, blocks in self.stages:
            yield up
            for block in blocks:
                yield block.l1
                yield block.l2

    def latent(self, z):
        h = as_tensor(z)
        if h.ndim == 1:
            h = h.reshape(1, -1)
        if h.shape[1] != self.meta_dim:
            raise DimensionError(f"meta input shape {h.shape} vs primary input {self.meta_dim}")
        for up, blocks in self.stages:
            h = up(h)
            for block in blocks:
                h = block(h)
        return h

    def forward(self, z):
        latent = self.latent(z)
        groups = {}
        for group, shape in self.spec.group_shapes().items():
            flat = self.heads[group](latent)
            groups[group] = flat.reshape((latent.shape[0],) + shape)
        return DynamicWeights(**groups)

    def forward_flat(self, z):
        """[B x n_w] tensor of all head outputs, in group order."""
        latent = self.latent(z)
        return concat([head(latent) for head in self.heads.values()], axis=-1)


def primary_forward(net, z):
    return net(z)


def init(net, scheme, seed):
    """Redraw every block and head parameter of `net` per `scheme`, deterministically per seed."""
    rng = make_rng(seed, 1)
    for linear in net.block_linears():
        bound = scheme.block_bound(linear.in_dim)
        linear.weight.data[...] = rng.uniform(-bound, bound, size=linear.weight.shape)
        linear.bias.data[...] = rng.uniform(-bound, bound, size=linear.bias.shape)
    for group, head in net.heads.items():
        bound = scheme.head_bound(group, head.in_dim)
        head.weight.data[...] = rng.uniform(-bound, bound, size=head.weight.shape)
        if scheme.zero_head_bias:
            head.bias.data[...] = 0.0
        else:
            bias_bound = default_uniform_bound(head.in_dim)
            head.bias.data[...] = rng.uniform(-bias_bound, bias_bound, size=head.bias.shape)
    net.scheme = scheme
    return net


class HyperNet(Module):
    """Primary network plus the dynamic network it parameterizes."""

    def __init__(self, meta_dim, spec, widths=LabConfig.DESK_WIDTHS, scheme=None, seed=0):
        super().__init__()
        self.spec = spec
        self.primary = self.add_module('primary', PrimaryNet(meta_dim, spec, widths, scheme, seed))

    def forward(self, z, x, cache=None):
        return dynamic_forward(self.primary(z), x, cache=cache)


def weight_tv_distance(sample_a, sample_b, bins=100):
    """Total-variation distance between histograms of two weight samples on shared edges."""
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("weight_tv_distance needs two non-empty samples")
    edges = np.histogram_bin_edges(np.concatenate([a, b]), bins=bins)
    count_a, _ = np.histogram(a, bins=edges)
    count_b, _ = np.histogram(b, bins=edges)
    return float(0.5 * np.abs(count_a / a.size - count_b / b.size).sum())


@dataclass
class AuditConfig:
    meta_dim: int = 4
    in_dim: int = 2
    out_dim: int = 1
    hidden_dim: int = LabConfig.DYNAMIC_HIDDEN
    widths: tuple = LabConfig.DESK_WIDTHS
    n_meta: int = 64
    bins: int = 100
    schemes: tuple = INIT_SCHEMES


def audit_initialization(cfg, seed=0):
    """Dynamic weights generated under each primary init vs. a default-initialized MLP-Small.

    Returns (rows, samples) where samples[scheme][layer] holds the pooled weights.
    """
    spec = DynamicSpec(cfg.in_dim, cfg.out_dim, cfg.hidden_dim)
    rng = make_rng(seed, 2)
    z = rng.uniform(-1.0, 1.0, size=(cfg.n_meta, cfg.meta_dim))
    mlp = MLP(cfg.in_dim, (cfg.hidden_dim,), cfg.out_dim, make_rng(seed, 3))
    reference = {'layer1': mlp.layers[0].weight.data.ravel(),
                 'layer2': mlp.layers[1].weight.data.ravel()}

    rows = []
    samples = {'mlp_small': reference}
    for name in cfg.schemes:
        net = PrimaryNet(cfg.meta_dim, spec, cfg.widths, InitScheme.by_name(name), seed)
        weights = net(z)
        layers = {'layer1': weights.w1.data.ravel(), 'layer2': weights.w2.data.ravel()}
        samples[name] = layers
        for layer, values in layers.items():
            rows.append({
                'layer': layer,
                'scheme': name,
                'tv_vs_mlp_init': weight_tv_distance(values, reference[layer], cfg.bins),
                'weight_std': float(values.std()),
                'weight_min': float(values.min()),
                'weight_max': float(values.max())
            })
        logger.info("init audit %s: layer1 std %.4g, layer2 std %.4g", name,
                    layers['layer1'].std(), layers['layer2'].std())
    return rows, samples
