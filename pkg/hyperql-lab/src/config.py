# src/config.py
"""
Experiment configuration: dataclass defaults <- JSON file <- dotted overrides.

Overrides are `--section.key value` pairs whose values are parsed as JSON
literals and fall back to plain strings. Unknown sections or keys are
rejected with the dotted key path.
"""
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from typing import Optional

from .critics import CRITIC_KINDS
from .environments import LQREnv, PointMassTasks
from .errors import ConfigError, MissingInputError
from .grad_fidelity import CsProtocol
from .hypernet import INIT_SCHEMES, AuditConfig
from .meta_rl import MODEL_KINDS, OBJECTIVES, MetaConfig
from .plotting import PlotSpec
from .policies import Policy
from .prop1_lab import DIRECTIONS, BanditConfig
from .trainers import ALGOS, TrainerConfig
from .utils import LabConfig, output_root


@dataclass
class EnvConfig:
    name: str = 'lqr'
    n_s: int = 4
    n_a: int = 2
    lqr_seed: int = LabConfig.LQR_SEED
    gamma: float = 0.99
    horizon: int = 200
    noise_std: float = 0.0

    def build(self):
        if self.name != 'lqr':
            raise ConfigError('env.name', f"unsupported environment '{self.name}'")
        return LQREnv.default(self.lqr_seed, self.n_s, self.n_a, gamma=self.gamma,
                              horizon=self.horizon, noise_std=self.noise_std)


SECTIONS = {
    'trainer': TrainerConfig,
    'protocol': CsProtocol,
    'bandit': BanditConfig,
    'meta': MetaConfig,
    'env': EnvConfig,
    'audit': AuditConfig,
    'plot': PlotSpec
}
TOP_LEVEL = ('seed', 'out_dir')
CHOICES = {
    'trainer.algo': ALGOS,
    'trainer.critic': tuple(CRITIC_KINDS),
    'trainer.policy': Policy.KINDS,
    'trainer.mlp_kind': tuple(LabConfig.MLP_HIDDEN),
    'trainer.init_scheme': INIT_SCHEMES,
    'meta.model': MODEL_KINDS,
    'meta.objective': OBJECTIVES,
    'meta.family': PointMassTasks.FAMILIES,
    'meta.init_scheme': INIT_SCHEMES,
    'bandit.direction': DIRECTIONS,
    'env.name': ('lqr',),
    'audit.schemes': INIT_SCHEMES
}


@dataclass
class ExperimentConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    protocol: CsProtocol = field(default_factory=CsProtocol)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    audit: AuditConfig = field(default_factory=AuditConfig)
    plot: PlotSpec = field(default_factory=PlotSpec)
    seed: int = 0
    out_dir: Optional[str] = None

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        payload = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def resolved_out_dir(self, command):
        return self.out_dir or os.path.join(output_root(), command)

    def write_resolved(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, 'config.resolved.json')
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    def meta_tasks(self):
        m = self.meta
        return PointMassTasks(m.family, m.n_train_tasks, m.n_test_tasks, m.seed, m.horizon, m.gamma)


def parse_value(text):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def parse_overrides(tokens):
    """['--trainer.batch', '100', ...] -> {'trainer.batch': 100, ...}"""
    overrides = {}
    tokens = list(tokens or [])
    i = 0
    while i < len(tokens):
        key = tokens[i]
        if not key.startswith('--') or i + 1 >= len(tokens):
            raise ConfigError(key.lstrip('-'), "override needs the form --section.key value")
        overrides[key[2:]] = parse_value(tokens[i + 1])
        i += 2
    return overrides


def _coerce(field_type, value, key_path):
    """Check value against the field's annotated type; lists become tuples, integral floats ints."""
    if typing.get_origin(field_type) is typing.Union:
        if value is None:
            return None
        field_type = next(t for t in typing.get_args(field_type) if t is not type(None))
    if field_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(key_path, f"expected a boolean, got {value!r}")
        return value
    if field_type in (int, float) and (isinstance(value, bool) or
                                       not isinstance(value, (int, float))):
        raise ConfigError(key_path, f"expected a number, got {value!r}")
    if field_type is int:
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(key_path, f"expected an integer, got {value!r}")
            return int(value)
        return value
    if field_type is float:
        return float(value)
    if field_type is str and not isinstance(value, str):
        raise ConfigError(key_path, f"expected a string, got {value!r}")
    if field_type is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key_path, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def _check_choices(cfg):
    for key_path, allowed in CHOICES.items():
        section, key = key_path.split('.')
        value = getattr(getattr(cfg, section), key)
        values = value if isinstance(value, tuple) else (value,)
        for item in values:
            if item not in allowed:
                raise ConfigError(key_path, f"'{item}' is not one of {', '.join(allowed)}")


def _set(cfg, key_path, value, explicit):
    parts = key_path.split('.')
    if len(parts) == 1:
        if parts[0] not in TOP_LEVEL:
            raise ConfigError(key_path, "unknown key")
        setattr(cfg, parts[0], _coerce(_field_types(cfg)[parts[0]], value, key_path))
        return
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(key_path, "unknown section")
    section, key = parts
    target = getattr(cfg, section)
    types = _field_types(target)
    if key not in types:
        raise ConfigError(key_path, "unknown key")
    setattr(target, key, _coerce(types[key], value, key_path))
    explicit.add(key_path)


def _field_types(target):
    return {f.name: f.type for f in dataclasses.fields(target)}


def resolve_config(path=None, overrides=None):
    """Build the ExperimentConfig for one run."""
    cfg = ExperimentConfig()
    explicit = set()
    if path is not None:
        if not os.path.exists(path):
            raise MissingInputError(f"config file not found: {path}")
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(os.path.basename(path), f"invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(os.path.basename(path), "top level must be an object")
        for name, value in data.items():
            if isinstance(value, dict):
                for key, inner in value.items():
                    _set(cfg, f"{name}.{key}", inner, explicit)
            else:
                _set(cfg, name, value, explicit)
    for key_path, value in (overrides or {}).items():
        _set(cfg, key_path, value, explicit)
    _check_choices(cfg)
    # the run seed reaches every section that did not pin its own
    for section in SECTIONS:
        target = getattr(cfg, section)
        if hasattr(target, 'seed') and f"{section}.seed" not in explicit:
            target.seed = cfg.seed
    return cfg
