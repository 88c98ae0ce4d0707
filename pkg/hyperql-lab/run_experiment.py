#!/usr/bin/env python3
"""
Experiment runner for hyperql-lab.

    python run_experiment.py <command> [--config run.json] [--section.key value ...]

Commands: train, cs-sweep, prop1, meta-train, meta-variance, init-audit, plot.
Every run writes config.resolved.json, metrics.csv, checkpoints/ and plots/
under its output directory.
"""

import argparse
import logging
import os
import sys

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.config import parse_overrides, resolve_config
from src.environments import rollout
from src.errors import (ConfigError, DivergenceError, EnvironmentDivergenceError,
                        InstabilityError, MissingInputError)
from src.grad_fidelity import make_cs_hook
from src.hypernet import audit_initialization
from src.issue_logger import IssueLogger
from src.meta_rl import grad_noise_harness, make_meta_policy, meta_train
from src.metrics_io import (AUDIT_COLUMNS, CS_COLUMNS, META_VARIANCE_COLUMNS, PROP1_COLUMNS,
                            TRAIN_COLUMNS, write_metrics)
from src.plotting import PlotSpec, plot, plot_weight_histograms
from src.policies import ZeroPolicy
from src.prop1_lab import run_prop1
from src.sql_engine import SQLMetadataLogger
from src.trainers import train
from src.utils import LabConfig, configure_logging

logger = logging.getLogger("run_experiment")

COMMANDS = ('train', 'cs-sweep', 'prop1', 'meta-train', 'meta-variance', 'init-audit', 'plot')

# shorthand flag -> dotted config key
SHORTHANDS = {
    'env': 'env.name',
    'critic': 'trainer.critic',
    'algo': 'trainer.algo',
    'steps': 'trainer.total_steps',
    'seed': 'seed',
    'out': 'out_dir',
    'alphas': 'bandit.alphas',
    'instances': 'bandit.instances',
    'model': 'meta.model',
    'objective': 'meta.objective',
    'family': 'meta.family',
    'metrics': 'plot.source'
}


def _paths(out_dir):
    paths = {
        'metrics': os.path.join(out_dir, 'metrics.csv'),
        'checkpoints': os.path.join(out_dir, 'checkpoints'),
        'plots': os.path.join(out_dir, 'plots')
    }
    os.makedirs(paths['checkpoints'], exist_ok=True)
    os.makedirs(paths['plots'], exist_ok=True)
    return paths


def cmd_train(cfg, out_dir):
    paths = _paths(out_dir)
    env = cfg.env.build()
    print("Step 2: Training actor-critic...")
    rows, trainer = train(cfg.trainer, env, checkpoint_dir=paths['checkpoints'])
    write_metrics(rows, paths['metrics'], TRAIN_COLUMNS)

    print("Step 3: Zero-policy baseline...")
    zero = ZeroPolicy(env.n_s, env.n_a)
    baseline = sum(rollout(env, zero, seed=cfg.trainer.seed, stream=10_000 + k,
                           deterministic=True).discounted_return()
                   for k in range(cfg.trainer.eval_episodes)) / cfg.trainer.eval_episodes

    print("Step 4: Plotting...")
    if rows:
        plot(paths['metrics'], PlotSpec(y=('eval_return_mean',), window=1,
                                        title=f"{cfg.trainer.critic} on {cfg.env.name}"),
             os.path.join(paths['plots'], 'eval_return.svg'))
    return {'final_eval_return': rows[-1]['eval_return_mean'] if rows else None,
            'zero_policy_return': baseline}


def cmd_cs_sweep(cfg, out_dir):
    paths = _paths(out_dir)
    env = cfg.env.build()
    print("Step 2: Training with the CS protocol hook...")
    hook = make_cs_hook(cfg.protocol, env)
    rows, trainer = train(cfg.trainer, env, checkpoint_dir=paths['checkpoints'], cs_hook=hook,
                          cs_every=cfg.protocol.eval_every)
    write_metrics(trainer.cs_rows, paths['metrics'], CS_COLUMNS)
    write_metrics(rows, os.path.join(out_dir, 'train_metrics.csv'), TRAIN_COLUMNS)

    print("Step 3: Plotting...")
    if trainer.cs_rows:
        plot(paths['metrics'], PlotSpec(y=('mean_cs', 'learnable_frac@0.25', 'learnable_frac@0.75'),
                                        window=1, title="gradient cosine similarity"),
             os.path.join(paths['plots'], 'cs_sweep.svg'))
    last = trainer.cs_rows[-1] if trainer.cs_rows else {}
    return {'mean_cs': last.get('mean_cs'), 'learnable_frac@0.25': last.get('learnable_frac@0.25')}


def cmd_prop1(cfg, out_dir):
    paths = _paths(out_dir)
    print("Step 2: Safe-step verification on quadratic bandits...")
    rows, counter = run_prop1(cfg.bandit)
    write_metrics(rows, paths['metrics'], PROP1_COLUMNS)
    write_metrics(counter, os.path.join(out_dir, 'counterexamples.csv'))
    return {'min_advantage': min(r['advantage_closed'] for r in rows) if rows else None,
            'counterexamples': sum(c['negative'] for c in counter)}


def cmd_meta_train(cfg, out_dir):
    paths = _paths(out_dir)
    family = cfg.meta_tasks()
    policy = make_meta_policy(cfg.meta, family)
    print(f"Step 2: Meta-training {policy.kind} ({cfg.meta.objective})...")
    rows = meta_train(policy, family, cfg.meta, checkpoint_dir=paths['checkpoints'])
    write_metrics(rows, paths['metrics'])

    print("Step 3: Plotting...")
    if rows:
        plot(paths['metrics'], PlotSpec(x='iteration', y=('test_pre', 'test_post'), window=1,
                                        title=f"{policy.kind} on {cfg.meta.family}"),
             os.path.join(paths['plots'], 'meta_returns.svg'))
    return {'test_post': rows[-1]['test_post'] if rows else None}


def cmd_meta_variance(cfg, out_dir):
    paths = _paths(out_dir)
    family = cfg.meta_tasks()
    policy = make_meta_policy(cfg.meta, family)
    variance_rows = []

    def on_checkpoint(iteration, current):
        stats = grad_noise_harness(current, family, cfg.meta, round_id=iteration)
        variance_rows.append({'checkpoint': iteration, 'model_kind': current.kind, **stats})
        logger.info("checkpoint %d: CoV %s", iteration, stats['cov'])

    print(f"Step 2: Meta-training {policy.kind} with the gradient-noise harness...")
    rows = meta_train(policy, family, cfg.meta, checkpoint_dir=paths['checkpoints'],
                      on_checkpoint=on_checkpoint)
    write_metrics(variance_rows, paths['metrics'], META_VARIANCE_COLUMNS)
    write_metrics(rows, os.path.join(out_dir, 'train_metrics.csv'))
    covs = [r['cov'] for r in variance_rows if r['cov'] is not None]
    return {'median_cov': sorted(covs)[len(covs) // 2] if covs else None}


def cmd_init_audit(cfg, out_dir):
    paths = _paths(out_dir)
    print("Step 2: Auditing primary initializations...")
    rows, samples = audit_initialization(cfg.audit, cfg.seed)
    write_metrics(rows, paths['metrics'], AUDIT_COLUMNS)
    plot_weight_histograms(samples, os.path.join(paths['plots'], 'init_histograms.svg'),
                           bins=cfg.audit.bins)
    return {f"tv_{r['scheme']}_{r['layer']}": r['tv_vs_mlp_init'] for r in rows}


def cmd_plot(cfg, out_dir):
    paths = _paths(out_dir)
    spec = cfg.plot
    if not spec.source:
        raise MissingInputError("plot needs --metrics <csv> (plot.source)")
    name = os.path.splitext(os.path.basename(spec.source))[0] + '.svg'
    print("Step 2: Rendering plot...")
    plot(spec.source, spec, os.path.join(paths['plots'], name))
    return {}


HANDLERS = {
    'train': cmd_train,
    'cs-sweep': cmd_cs_sweep,
    'prop1': cmd_prop1,
    'meta-train': cmd_meta_train,
    'meta-variance': cmd_meta_variance,
    'init-audit': cmd_init_audit,
    'plot': cmd_plot
}


def expand_shorthands(tokens):
    expanded = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        name = token[2:] if token.startswith('--') else None
        if name in SHORTHANDS and i + 1 < len(tokens):
            value = tokens[i + 1]
            if name == 'alphas':
                value = '[' + value + ']'
            expanded += ['--' + SHORTHANDS[name], value]
            i += 2
            continue
        expanded.append(token)
        i += 1
    return expanded


def run(command, config_path=None, overrides=None):
    """Execute one subcommand; returns the process exit status."""
    issues = IssueLogger()
    print(f"hyperql-lab: {command}")
    try:
        print("Step 1: Resolving configuration...")
        cfg = resolve_config(config_path, overrides)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        issues.log_issue("CONFIG_ERROR", str(exc), "HIGH", command)
        return LabConfig.EXIT_CONFIG
    except MissingInputError as exc:
        logger.error("missing input: %s", exc)
        issues.log_issue("MISSING_INPUT", str(exc), "HIGH", command)
        return LabConfig.EXIT_MISSING_INPUT

    out_dir = cfg.resolved_out_dir(command)
    registry = SQLMetadataLogger()
    run_id = registry.log_run(command, out_dir, cfg.digest())
    status = LabConfig.EXIT_OK
    try:
        cfg.write_resolved(out_dir)
        kpis = HANDLERS[command](cfg, out_dir)
        for name, value in kpis.items():
            registry.log_kpi(run_id, name, value)
        print(f"\nDone. Outputs in {out_dir}")
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        issues.log_issue("CONFIG_ERROR", str(exc), "HIGH", command)
        status = LabConfig.EXIT_CONFIG
    except (DivergenceError, EnvironmentDivergenceError, InstabilityError) as exc:
        logger.error("numerical divergence: %s", exc)
        issues.log_issue("DIVERGENCE", str(exc), "HIGH", command)
        status = LabConfig.EXIT_DIVERGENCE
    except MissingInputError as exc:
        logger.error("missing input: %s", exc)
        issues.log_issue("MISSING_INPUT", str(exc), "MEDIUM", command)
        status = LabConfig.EXIT_MISSING_INPUT
    except Exception as exc:
        issues.log_issue("RUN_ERROR", f"Error: {exc}", "HIGH", command)
        registry.finish_run(run_id, 1)
        raise
    registry.finish_run(run_id, status)
    return status


def main(argv=None):
    parser = argparse.ArgumentParser(description="hyperql-lab experiment runner")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", dest="config", default=None,
                        help="JSON configuration file")
    parser.add_argument("--log-level", dest="log_level", default="INFO")
    args, rest = parser.parse_known_args(argv)
    configure_logging(args.log_level)
    try:
        overrides = parse_overrides(expand_shorthands(rest))
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return LabConfig.EXIT_CONFIG
    return run(args.command, args.config, overrides)


if __name__ == "__main__":
    sys.exit(main())
