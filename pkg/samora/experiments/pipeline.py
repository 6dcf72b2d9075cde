"""
The cached, resumable two-stage pipeline.

Stages and their cache entries:

``data``
    the generated (or loaded) labeled set and unlabeled corpus;
``teacher-<level>``
    the (continually pre-trained) frozen teacher for the image and patch levels;
``expert-<level>``
    the stage-1 LoRA expert of each retained level;
``finetune``
    the stage-2 model and its training report;
``evaluate``
    the test-set metrics report.

Each entry's key hashes its configuration section with the keys of the entries
it depends on, so changing a setting re-runs exactly the stages it affects.
"""

import dataclasses
import logging
import shutil
from collections import namedtuple
from pathlib import Path

import pandas as pd
import yaml

from samora import Level
from samora.checkpoint import (
    save_module, load_module, save_expert, load_experts_into
)
from samora.config import config_hash, save_config
from samora.crossfold import split_fewshot
from samora.datasets import (
    generate_synthetic, load_dataset, save_dataset, load_raster_dir, SyntheticData
)
from samora.evaluation import evaluate_volumes, MetricsReport
from samora.finetune import Finetuner, write_train_report
from samora.models.assembly import SAMoraModel
from samora.models.encoder import FrozenEncoder
from samora.models.teachers import build_teacher, freeze
from samora.pretext import cpt_teacher, distill_level, pretrain_pixel
from samora.store import ArtifactStore, stage_key, save_object, load_object
from samora.util import Stopwatch, derive_seed, version_string
from samora.util.log import run_log

_log = logging.getLogger(__name__)

TEACHER_LEVELS = (Level.IMAGE, Level.PATCH)

PipelineResult = namedtuple('PipelineResult', ['output_dir', 'report', 'ran', 'keys'])
PipelineResult.__doc__ = 'The outcome of a pipeline run (named tuple).'
PipelineResult.report.__doc__ = 'The test-set :class:`~samora.evaluation.MetricsReport`.'
PipelineResult.ran.__doc__ = 'The stages that were executed (not served from the cache).'
PipelineResult.keys.__doc__ = 'The cache key of every stage.'


def load_data(data_cfg):
    """
    Generate or load the data described by a data configuration.

    Returns:
        SyntheticData: the labeled set and unlabeled corpus.
    """
    if data_cfg.path is None:
        return generate_synthetic(data_cfg.synthetic)
    path = Path(data_cfg.path)
    if (path / 'labeled' / 'manifest.csv').exists():
        # layout written by save_data
        labeled = load_dataset(path / 'labeled')
        if (path / 'unlabeled' / 'manifest.csv').exists():
            unlabeled = load_dataset(path / 'unlabeled')
        else:
            unlabeled = labeled.split('train').unlabeled()
        return SyntheticData(labeled, unlabeled)
    if (path / 'manifest.csv').exists():
        ds = load_dataset(path)
    else:
        ds = load_raster_dir(path, data_cfg.synthetic.num_classes)
    if (ds.slices['split'] == 'unlabeled').any():
        unlabeled = ds.split('unlabeled')
        labeled = ds.subset((ds.slices['split'] != 'unlabeled').values.nonzero()[0])
    else:
        labeled = ds
        unlabeled = ds.split('train').unlabeled()
    return SyntheticData(labeled, unlabeled)


def save_data(data, path):
    "Write a labeled set and corpus as ``labeled/`` and ``unlabeled/`` slice directories."
    path = Path(path)
    save_dataset(data.labeled, path / 'labeled')
    if len(data.unlabeled):
        save_dataset(data.unlabeled, path / 'unlabeled')
    else:
        _log.warning('unlabeled corpus is empty, not writing %s', path / 'unlabeled')
    return path


class Pipeline:
    """
    Runs the SAMora pipeline for one configuration against an artifact store.

    Args:
        config(samora.config.ExperimentConfig): the configuration.
        store(samora.store.ArtifactStore): the cache (default at the cache root).
    """

    def __init__(self, config, store=None):
        self.config = config
        self.store = store or ArtifactStore()
        self.ran = []
        self.keys = {}
        self._data = None

    def _cached(self, stage, key, build, inputs=None, required=()):
        self.keys[stage] = key
        p = self.store.lookup(stage, key, required)
        if p is None:
            _log.info('running stage %s (%s)', stage, key)
            timer = Stopwatch()
            p = self.store.commit(stage, key, build, inputs)
            _log.info('[%s] finished stage %s', timer, stage)
            self.ran.append(stage)
        return p

    def data(self):
        "The data set and corpus."
        cfg = self.config
        key = stage_key('data', config_hash(cfg.data))

        def build(tmp):
            save_object(load_data(cfg.data), tmp / 'data.bpk')

        p = self._cached('data', key, build, {'data': dataclasses.asdict(cfg.data)},
                         ['data.bpk'])
        if self._data is None:
            self._data = load_object(p / 'data.bpk')
        return self._data

    def teacher(self, level):
        "The frozen teacher for a distilled level."
        cfg = self.config
        level = Level.parse(level)
        tcfg = getattr(cfg.teacher, level.value)
        pcfg = getattr(cfg.pretext, level.value)
        ec = cfg.encoder
        cpt = cfg.pretrain_mode == 'ts_cpt'
        self.data()
        stage = 'teacher-' + level.value
        key = stage_key(stage, {'teacher': config_hash(tcfg), 'pretext': config_hash(pcfg),
                                'augment': config_hash(cfg.data.augment), 'cpt': cpt,
                                'image_size': ec.image_size, 'patch_size': ec.patch_size},
                        [self.keys['data']])

        def build(tmp):
            teacher = build_teacher(tcfg, ec.image_size, ec.patch_size)
            if cpt:
                cpt_teacher(teacher, self._data.unlabeled, pcfg, cfg.data.augment)
                pd.Series(teacher.cpt_losses_, name='loss').to_csv(tmp / 'losses.csv',
                                                                   index_label='step')
            else:
                freeze(teacher)
            save_module(teacher, tmp / 'teacher', stage=stage, config_hash=config_hash(tcfg),
                        seed=tcfg.seed)

        p = self._cached(stage, key, build, required=['teacher/manifest.yaml'])
        teacher = build_teacher(tcfg, ec.image_size, ec.patch_size)
        load_module(teacher, p / 'teacher', stage=stage)
        return freeze(teacher)

    def expert(self, level):
        "The path of a stage-1 expert checkpoint."
        cfg = self.config
        level = Level.parse(level)
        pcfg = getattr(cfg.pretext, level.value)
        rank = cfg.lora.rank
        self.data()
        upstream = [self.keys['data']]
        teacher = None
        if level in TEACHER_LEVELS:
            teacher = self.teacher(level)
            upstream.append(self.keys['teacher-' + level.value])
        stage = 'expert-' + level.value
        key = stage_key(stage, {'encoder': config_hash(cfg.encoder), 'rank': rank,
                                'pretext': config_hash(pcfg)}, upstream)

        def build(tmp):
            student = FrozenEncoder(cfg.encoder)
            corpus = self._data.unlabeled
            if level == Level.PIXEL:
                res = pretrain_pixel(student, corpus, pcfg, rank=rank)
            else:
                res = distill_level(level, teacher, student, corpus, pcfg, rank=rank)
            pd.Series(res.losses, name='loss').to_csv(tmp / 'losses.csv', index_label='step')
            save_expert(res.expert, tmp / 'expert', config_hash=config_hash(pcfg),
                        seed=pcfg.seed)

        p = self._cached(stage, key, build, required=['expert/manifest.yaml'])
        return p / 'expert'

    def splits(self):
        """
        The few-shot training subset and the test set.
        """
        cfg = self.config
        labeled = self.data().labeled
        train = labeled.split('train')
        test = labeled.split('test')
        seed = derive_seed('fewshot', base=cfg.seed)
        few = split_fewshot(train, cfg.finetune.fewshot, seed)
        return few.labeled, test

    def build_model(self):
        "A fresh stage-2 model for the configuration."
        cfg = self.config
        return SAMoraModel(cfg.encoder, cfg.lora, cfg.fusion,
                           cfg.data.synthetic.num_classes, seed=cfg.seed)

    def finetune(self):
        "The path of the stage-2 entry."
        cfg = self.config
        scratch = cfg.pretrain_mode == 'scratch'
        self.data()
        levels = [Level.parse(lvl) for lvl in cfg.fusion.levels]
        experts = {} if scratch else {lvl: self.expert(lvl) for lvl in levels}
        upstream = [self.keys['data']] + [self.keys['expert-' + lvl.value] for lvl in experts]
        section = {
            'encoder': config_hash(cfg.encoder), 'lora': config_hash(cfg.lora),
            'fusion': config_hash(cfg.fusion), 'finetune': config_hash(cfg.finetune),
            'augment': config_hash(cfg.data.augment), 'seed': cfg.seed, 'scratch': scratch,
        }
        key = stage_key('finetune', section, upstream)

        def build(tmp):
            model = self.build_model()
            ft_cfg = cfg.finetune
            if scratch:
                ft_cfg = dataclasses.replace(ft_cfg, allow_scratch_adapters=True)
            else:
                load_experts_into(model, list(experts.values()))
            train, _ = self.splits()
            trainer = Finetuner(ft_cfg, cfg.data.augment).fit(model, train)
            save_module(model, tmp / 'model', stage='stage2', config_hash=config_hash(cfg),
                        seed=cfg.seed, extra={'strategy': model.strategy})
            write_train_report(trainer.state_.report, tmp / 'train_report.txt')

        return self._cached('finetune', key, build,
                            required=['model/manifest.yaml', 'train_report.txt'])

    def load_model(self, path=None):
        "Load the stage-2 model (from the cache, or an explicit checkpoint)."
        if path is None:
            path = self.finetune() / 'model'
        model = self.build_model()
        load_module(model, path, stage='stage2')
        model.adapters_loaded_ = True
        model.eval()
        return model

    def evaluate(self):
        "The test-set metrics report."
        cfg = self.config
        ft = self.finetune()
        key = stage_key('evaluate', config_hash(cfg.eval), [self.keys['finetune']])

        def build(tmp):
            model = self.load_model(ft / 'model')
            _, test = self.splits()
            report = evaluate_volumes(model, test, cfg.eval, seed=cfg.seed,
                                      config_hash=config_hash(cfg))
            report.save(tmp / 'report')

        p = self._cached('evaluate', key, build, required=['report/volumes.csv'])
        return MetricsReport.load(p / 'report')

    def run(self, output_dir=None):
        """
        Run (or resume) the whole pipeline and write the run's artifact directory,
        including its log in ``run.log``.

        Returns:
            PipelineResult: the result.
        """
        cfg = self.config
        out = Path(output_dir or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with run_log(out / 'run.log'):
            timer = Stopwatch()
            report = self.evaluate()
            save_config(cfg, out / 'config.yaml')
            ft = self.store.path('finetune', self.keys['finetune'])
            shutil.copyfile(ft / 'train_report.txt', out / 'train_report.txt')
            if (out / 'model').exists():
                shutil.rmtree(out / 'model')
            shutil.copytree(ft / 'model', out / 'model')
            report.save(out / 'report')
            prov = {'config_hash': config_hash(cfg), 'version': version_string(),
                    'seed': cfg.seed, 'seeds': list(cfg.seeds), 'keys': dict(self.keys),
                    'ran': list(self.ran)}
            with open(out / 'provenance.yaml', 'w') as f:
                yaml.safe_dump(prov, f, sort_keys=True)
            _log.info('[%s] pipeline finished: %s (ran %s)', timer, report,
                      ', '.join(self.ran) or 'nothing')
        return PipelineResult(out, report, list(self.ran), dict(self.keys))


def run_pipeline(config, store=None, output_dir=None):
    """
    Run the full pipeline: teacher CPT, the three expert pre-trainings,
    fine-tuning and evaluation, caching each stage.

    Args:
        config(samora.config.ExperimentConfig): the configuration.
        store(samora.store.ArtifactStore): the cache.
        output_dir: overrides ``config.output_dir``.

    Returns:
        PipelineResult: the result.
    """
    return Pipeline(config, store).run(output_dir)
