# src/checkpoint.py
"""
Plain-text checkpoints: one header line per tensor followed by its values in
row-major order, each written with 17 significant digits so that float64
values load back bit-identical.

    tensor <name> <dims comma separated, '-' for a scalar>
    <v0> <v1> ...
"""
import logging
import os
from collections import OrderedDict

import numpy as np

from .errors import ContractError, DimensionError, MissingInputError

logger = logging.getLogger(__name__)

HEADER = '# hyperql-lab checkpoint v1'


def _shape_token(shape):
    return ','.join(str(d) for d in shape) if shape else '-'


def _parse_shape(token):
    return () if token == '-' else tuple(int(d) for d in token.split(','))


def checkpoint_save(state, path):
    """Write a name -> array mapping."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w') as f:
        f.write(HEADER + '\n')
        for name, value in state.items():
            if any(ch.isspace() for ch in name):
                raise ContractError(f"tensor name '{name}' contains whitespace")
            value = np.asarray(value, dtype=np.float64)
            f.write(f"tensor {name} {_shape_token(value.shape)}\n")
            f.write(' '.join('%.17g' % v for v in value.ravel()) + '\n')
    logger.info("checkpoint written: %s (%d tensors)", path, len(state))
    return path


def checkpoint_load(path):
    """Read a checkpoint back into an ordered name -> array mapping."""
    if not os.path.exists(path):
        raise MissingInputError(f"checkpoint not found: {path}")
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != HEADER:
        raise ContractError(f"{path} is not a checkpoint file")
    state = OrderedDict()
    body = lines[1:]
    for i in range(0, len(body) - 1, 2):
        kind, name, token = body[i].split()
        if kind != 'tensor':
            raise ContractError(f"unexpected record '{kind}' in {path}")
        shape = _parse_shape(token)
        values = np.array([float(v) for v in body[i + 1].split()], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise DimensionError(
                f"tensor '{name}' stores {values.size} values, header says shape {shape}")
        state[name] = values.reshape(shape)
    return state


def save_modules(modules, path):
    """Save several modules into one file, prefixing each tensor with its module name."""
    state = OrderedDict()
    for prefix, module in modules.items():
        for name, value in module.state_dict().items():
            state[f"{prefix}.{name}"] = value
    return checkpoint_save(state, path)


def load_modules(modules, path):
    state = checkpoint_load(path)
    for prefix, module in modules.items():
        head = prefix + '.'
        module.load_state_dict({k[len(head):]: v for k, v in state.items() if k.startswith(head)})
    return modules
