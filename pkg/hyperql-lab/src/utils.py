# src/utils.py
import logging
import os

import numpy as np


class LabConfig:
    """Configuration constants shared by the lab modules"""
    # Primary network stage widths
    FULL_WIDTHS = (256, 512, 1024)
    DESK_WIDTHS = (64, 128, 256)
    DYNAMIC_HIDDEN = 256

    # Fixed head half-widths: first dynamic layer, second dynamic layer, distribution head
    HEAD_RANGES = {
        'layer1': 0.05,
        'layer2': 0.008,
        'log_std': 0.001
    }
    BLOCK_GAIN = 1.0 / np.sqrt(12.0)

    MLP_HIDDEN = {
        'standard': (256, 256),
        'small': (256,),
        'large': (2900, 2900),
        'linear': ()
    }

    LQR_SEED = 7
    CS_THRESHOLDS = (0.0, 0.25, 0.5, 0.75)

    EXIT_OK = 0
    EXIT_CONFIG = 2
    EXIT_DIVERGENCE = 3
    EXIT_MISSING_INPUT = 4

    OUT_ENV_VAR = 'HYPERQL_OUT'
    DEFAULT_OUT_ROOT = 'runs'


def make_rng(seed, *stream):
    """Independent generator for (seed, stream...) so work can be split without sharing state."""
    entropy = [int(seed)] + [int(s) for s in stream]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def output_root(default=None):
    return os.environ.get(LabConfig.OUT_ENV_VAR) or default or LabConfig.DEFAULT_OUT_ROOT


def configure_logging(level='INFO'):
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s'
    )


def discounted_sum(rewards, gamma):
    """Sum of gamma^t r_t along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    discounts = gamma ** np.arange(rewards.shape[-1])
    return (rewards * discounts).sum(axis=-1)


def returns_to_go(rewards, gamma):
    """Discounted return-to-go along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[:-1])
    for t in reversed(range(rewards.shape[-1])):
        running = rewards[..., t] + gamma * running
        out[..., t] = running
    return out
