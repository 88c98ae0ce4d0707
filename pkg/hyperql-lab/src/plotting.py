# src/plotting.py
import logging
import os
from dataclasses import dataclass
from typing import Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from .metrics_io import read_metrics  # noqa: E402

logger = logging.getLogger(__name__)

sns.set(style="whitegrid")


@dataclass
class PlotSpec:
    source: Optional[str] = None
    x: str = 'step'
    y: tuple = ('eval_return_mean',)
    group: Optional[str] = None
    window: int = 20
    iqr: bool = False
    title: str = ''
    xlabel: Optional[str] = None
    ylabel: Optional[str] = None


def moving_average(values, window):
    """Trailing mean over up to `window` points; window 1 is the identity."""
    return pd.Series(np.asarray(values, dtype=np.float64)).rolling(
        max(int(window), 1), min_periods=1).mean().to_numpy()


def plot_series(df, spec):
    """Curves to draw, each {'label', 'x', 'y'} plus 'lower'/'upper' for IQR bands."""
    series = []
    for column in spec.y:
        if spec.group is None or not spec.iqr:
            groups = [(None, df)] if spec.group is None else list(df.groupby(spec.group, sort=True))
            for key, part in groups:
                part = part.sort_values(spec.x)
                label = column if key is None else f"{column} ({spec.group}={key})"
                series.append({'label': label, 'x': part[spec.x].to_numpy(),
                               'y': moving_average(part[column], spec.window)})
            continue
        wide = df.pivot_table(index=spec.x, columns=spec.group, values=column, aggfunc='mean')
        wide = wide.sort_index()
        smoothed = np.column_stack([moving_average(wide[c], spec.window) for c in wide.columns])
        series.append({
            'label': f"{column} (mean over {wide.shape[1]} {spec.group})",
            'x': wide.index.to_numpy(),
            'y': smoothed.mean(axis=1),
            'lower': np.percentile(smoothed, 25, axis=1),
            'upper': np.percentile(smoothed, 75, axis=1)
        })
    return series


def plot(metrics_csv, spec, out_path):
    """Render the requested columns of a metrics CSV to an SVG file."""
    required = [spec.x, *spec.y] + ([spec.group] if spec.group else [])
    df = read_metrics(metrics_csv, required=required)
    series = plot_series(df, spec)

    fig, ax = plt.subplots(figsize=(6, 3))
    for s in series:
        ax.plot(s['x'], s['y'], label=s['label'])
        if 'lower' in s:
            ax.fill_between(s['x'], s['lower'], s['upper'], alpha=0.25)
    ax.set_title(spec.title)
    ax.set_xlabel(spec.xlabel or spec.x)
    ax.set_ylabel(spec.ylabel or ', '.join(spec.y))
    ax.legend(loc='best', fontsize='small')
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, format='svg', bbox_inches='tight')
    plt.close(fig)
    logger.info("plot written: %s", out_path)
    return out_path


def plot_weight_histograms(samples, out_path, bins=100):
    """Overlayed histograms of generated dynamic weights per scheme, one panel per layer."""
    layers = sorted({layer for per_scheme in samples.values() for layer in per_scheme})
    fig, axes = plt.subplots(1, len(layers), figsize=(6 * len(layers), 3), squeeze=False)
    for ax, layer in zip(axes[0], layers):
        for scheme, per_scheme in samples.items():
            if layer in per_scheme:
                ax.hist(per_scheme[layer], bins=bins, histtype='step', density=True, label=scheme)
        ax.set_title(layer)
        ax.legend(loc='best', fontsize='small')
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.savefig(out_path, format='svg', bbox_inches='tight')
    plt.close(fig)
    return out_path
