"""
Experiment configuration: the nested settings for a full run, stored as YAML.

Every section is a dataclass owned by the module it configures.  Loading rejects
unknown keys, naming their dotted path; :func:`config_hash` identifies a section
(or a whole configuration) in the artifact store.
"""

import copy
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from samora.errors import ConfigError
from samora.util import stable_hash
from samora.augment import AugmentConfig
from samora.datasets import SyntheticSpec
from samora.evaluation import EvalConfig
from samora.finetune import FinetuneConfig
from samora.fusion import FusionConfig
from samora.models.encoder import EncoderConfig
from samora.models.lora import LoraConfig
from samora.models.teachers import TeacherConfig
from samora.pretext.train import PretextConfig

_log = logging.getLogger(__name__)

CACHE_ENV = 'SAMORA_CACHE_DIR'


@dataclass
class DataConfig:
    """
    Data settings.

    Attributes:
        path(str):
            a slice directory to load (saved data set or raster directory); ``None``
            generates synthetic data.
        synthetic(SyntheticSpec): synthetic generator settings.
        augment(AugmentConfig): augmentation ranges.
        target_spacing(list): resampling spacing for real data; not applied to synthetic data.
    """
    path: str = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    target_spacing: list = None


@dataclass
class PretextSection:
    "Per-level pretext settings."
    image: PretextConfig = field(default_factory=lambda: PretextConfig.for_level('image'))
    patch: PretextConfig = field(default_factory=lambda: PretextConfig.for_level('patch'))
    pixel: PretextConfig = field(default_factory=lambda: PretextConfig.for_level('pixel'))


@dataclass
class TeacherSection:
    "Teacher shapes for the distilled levels."
    image: TeacherConfig = field(default_factory=lambda: TeacherConfig(kind='conv'))
    patch: TeacherConfig = field(default_factory=lambda: TeacherConfig(kind='vit', width=128))


@dataclass
class ExperimentConfig:
    """
    The complete configuration of a pipeline run.

    Attributes:
        seed(int): the run seed (fine-tuning, augmentation and trainable initialization).
        seeds(list): seeds for repeated runs in ablations.
        output_dir(str): where run artifacts are written.
        pretrain_mode(str):
            how the experts are pre-trained: ``ts_cpt`` (teacher-student with
            teacher CPT), ``ts_no_cpt`` or ``scratch`` (no stage 1).
    """
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    pretext: PretextSection = field(default_factory=PretextSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = 'runs/default'
    pretrain_mode: str = 'ts_cpt'

    def __post_init__(self):
        if self.pretrain_mode not in PRETRAIN_MODES:
            raise ConfigError('pretrain_mode must be one of {}'.format(PRETRAIN_MODES))
        if self.data.synthetic.image_size != self.encoder.image_size and self.data.path is None:
            raise ConfigError('data.synthetic.image_size must match encoder.image_size')

    def for_seed(self, seed):
        "A copy of this configuration for a repeat seed."
        cfg = copy.deepcopy(self)
        cfg.seed = seed
        cfg.finetune.seed = seed
        cfg.data.augment.seed = seed
        return cfg


PRETRAIN_MODES = ('ts_cpt', 'ts_no_cpt', 'scratch')


def _is_config(cls):
    return isinstance(cls, type) and dataclasses.is_dataclass(cls)


def from_dict(cls, data, path=''):
    """
    Build a configuration dataclass from a nested dictionary.

    Raises:
        ConfigError: on unknown keys or invalid values, naming the dotted path.
    """
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError('{} must be a mapping'.format(path or 'configuration'))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in data if k not in fields]
    if unknown:
        raise ConfigError('unknown configuration key {}'.format(
            ', '.join(_dotted(path, k) for k in sorted(unknown))))
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if _is_config(ftype):
            if cls is PretextSection and isinstance(value, dict):
                value = dict({'level': name}, **value)
            kwargs[name] = from_dict(ftype, value, _dotted(path, name))
        else:
            kwargs[name] = value
    try:
        return _build(cls, kwargs)
    except ConfigError as e:
        raise ConfigError('{}: {}'.format(path or 'configuration', e))
    except (TypeError, ValueError) as e:
        raise ConfigError('invalid value in {}: {}'.format(path or 'configuration', e))


def _build(cls, kwargs):
    # pretext sections carry level-specific defaults, so unspecified keys must keep them
    if cls is PretextConfig:
        level = kwargs.get('level', 'image')
        return PretextConfig.for_level(level, **{k: v for k, v in kwargs.items() if k != 'level'})
    if cls is PretextSection:
        out = PretextSection()
        for k, v in kwargs.items():
            setattr(out, k, v)
        for lvl in ('image', 'patch', 'pixel'):
            if getattr(out, lvl).level != lvl:
                raise ConfigError('pretext.{} has level {}'.format(lvl, getattr(out, lvl).level))
        return out
    return cls(**kwargs)


def _dotted(path, key):
    return '{}.{}'.format(path, key) if path else str(key)


def to_dict(cfg):
    "Convert a configuration to plain nested dictionaries."
    return dataclasses.asdict(cfg)


def dump_config(cfg):
    "Serialize a configuration as YAML text."
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=False)


def save_config(cfg, path):
    "Write a configuration to a YAML file."
    Path(path).write_text(dump_config(cfg))


def load_config(path, cls=ExperimentConfig):
    """
    Load a configuration from a YAML file.

    Raises:
        ConfigError: if the file has unknown keys or invalid values.
    """
    with open(path) as f:
        data = yaml.safe_load(f)
    cfg = from_dict(cls, data)
    _log.info('loaded configuration %s from %s', config_hash(cfg), path)
    return cfg


def with_overrides(cfg, overrides):
    """
    Apply dotted-key overrides (e.g. ``{'fusion.strategy': 'lac'}``) to a
    configuration, re-validating the result.
    """
    data = to_dict(cfg)
    for key, value in overrides.items():
        node = data
        parts = key.split('.')
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError('unknown configuration key {}'.format(key))
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError('unknown configuration key {}'.format(key))
        node[parts[-1]] = value
    return from_dict(type(cfg), data)


def config_hash(cfg):
    """
    Hash of a configuration (or section): the first 16 hex digits of the SHA-256 of
    its canonical JSON encoding.

    >>> config_hash(LoraConfig()) == config_hash(LoraConfig(rank=4))
    True
    """
    if dataclasses.is_dataclass(cfg):
        cfg = to_dict(cfg)
    return stable_hash(cfg)


def cache_dir():
    "The artifact cache root (``$SAMORA_CACHE_DIR`` or ``~/.cache/samora``)."
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / '.cache' / 'samora'
