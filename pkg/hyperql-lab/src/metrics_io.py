# src/metrics_io.py
import os

import pandas as pd

from .errors import MissingInputError

FLOAT_FORMAT = '%.17g'

TRAIN_COLUMNS = ['step', 'eval_return_mean', 'eval_return_std', 'td_loss', 'surrogate']
CS_COLUMNS = ['step', 'state_idx', 'cs', 'mean_cs', 'undefined_frac', 'learnable_frac@0',
              'learnable_frac@0.25', 'learnable_frac@0.5', 'learnable_frac@0.75']
PROP1_COLUMNS = ['instance_id', 'alpha', 'eta', 'advantage_closed', 'advantage_mc']
META_VARIANCE_COLUMNS = ['checkpoint', 'model_kind', 'mean_return', 'std_return', 'var_return',
                         'cov']
AUDIT_COLUMNS = ['layer', 'scheme', 'tv_vs_mlp_init', 'weight_std', 'weight_min', 'weight_max']


def write_metrics(rows, path, columns=None):
    """Write row dicts as CSV; `columns` fixes the column order when given."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df = pd.DataFrame(rows, columns=columns)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return df


def append_metrics(rows, path, columns=None):
    df = pd.DataFrame(rows, columns=columns)
    header = not os.path.exists(path)
    df.to_csv(path, mode='a', header=header, index=False, float_format=FLOAT_FORMAT)
    return df


def read_metrics(path, required=()):
    if not os.path.exists(path):
        raise MissingInputError(f"metrics file not found: {path}")
    df = pd.read_csv(path)
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise MissingInputError(f"{path} has no column(s) {', '.join(missing)}")
    return df
