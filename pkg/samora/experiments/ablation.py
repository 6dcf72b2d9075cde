"""
Ablation harness: sweeps one configuration axis over several seeds.

Each cell of an :class:`AblationMatrix` is a complete pipeline run on a derived
configuration.  Cells share the artifact store, so stages whose inputs do not
depend on the swept value (data, teachers, and for most axes the experts) are
computed once and reused.  Cells receive only plain data, so they may run in
separate worker processes.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import pandas as pd

from samora import LEVELS, Level
from samora.config import ExperimentConfig, from_dict, to_dict, with_overrides, config_hash
from samora.errors import ConfigError
from samora.store import ArtifactStore
from samora.util import Stopwatch
from samora.util.parallel import invoker
from .pipeline import Pipeline

_log = logging.getLogger(__name__)

RUN_COLUMNS = ['axis', 'value', 'level', 'seed', 'mean_dice', 'mean_hd', 'config_hash']
SUMMARY_COLUMNS = ['axis', 'value', 'level', 'n', 'dice_mean', 'dice_std', 'hd_mean', 'hd_std']


class Axis(Enum):
    "The ablation axes."
    FUSION_STRATEGY = 'fusion_strategy'
    FUSION_ORDER = 'fusion_order'
    RANK = 'rank'
    PRETRAIN_MODE = 'pretrain_mode'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace('-', '_'))
        except ValueError:
            raise ConfigError('unknown ablation axis {!r}; expected one of {}'.format(
                value, ', '.join(a.value for a in cls)))


AXIS_VALUES = {
    Axis.FUSION_STRATEGY: ('hl_attn', 'lac', 'gated', 'compose'),
    Axis.FUSION_ORDER: ('211', '112', '121'),
    Axis.RANK: (1, 4, 16),
    Axis.PRETRAIN_MODE: ('scratch', 'ts_no_cpt', 'ts_cpt'),
}


def _overrides(axis, value, level):
    if axis == Axis.FUSION_STRATEGY:
        return {'fusion.strategy': value}
    elif axis == Axis.FUSION_ORDER:
        return {'fusion.strategy': 'hl_attn', 'fusion.order': value}
    elif axis == Axis.RANK:
        return {'lora.rank': value}
    else:
        return {'pretrain_mode': value, 'fusion.levels': [level]}


def _same_run(value, level):
    """
    The pre-training mode whose run is identical to ``value`` at ``level``, if any.
    The pixel expert has no teacher, so CPT does not change it.
    """
    if level == Level.PIXEL.value and value == 'ts_no_cpt':
        return 'ts_cpt'
    return None


@dataclass
class AblationMatrix:
    """
    One ablation axis with its values and repeats.

    The pre-training mode axis is crossed with the expert levels: each cell keeps a
    single expert, so the three pre-training modes are compared level by level.
    The pixel expert has no teacher, so its ``ts_no_cpt`` cell is dropped when
    ``ts_cpt`` is also swept.

    Attributes:
        axis(Axis): the swept axis.
        values(list): the axis values (default: all values of the axis).
        seeds(list): the repeat seeds (default: the base configuration's ``seeds``).
        levels(list): levels crossed with the pre-training mode axis.
    """
    axis: Axis
    values: list = None
    seeds: list = None
    levels: list = field(default_factory=lambda: [lvl.value for lvl in LEVELS])

    def __post_init__(self):
        self.axis = Axis.parse(self.axis)
        allowed = AXIS_VALUES[self.axis]
        if self.values is None:
            self.values = list(allowed)
        if self.axis == Axis.FUSION_ORDER:
            self.values = [str(v) for v in self.values]
        elif self.axis == Axis.RANK:
            self.values = [int(v) for v in self.values]
        bad = [v for v in self.values if v not in allowed]
        if bad:
            raise ConfigError('invalid {} values {}; expected a subset of {}'.format(
                self.axis.value, bad, list(allowed)))
        if len(set(self.values)) != len(self.values):
            raise ConfigError('duplicate {} values'.format(self.axis.value))
        self.levels = [Level.parse(lvl).value for lvl in self.levels]

    def cells(self, base_seeds=(0,)):
        """
        Enumerate the cells of the matrix.

        Returns:
            list: dictionaries with ``axis``, ``value``, ``level``, ``seed`` and
            ``overrides``.
        """
        seeds = self.seeds if self.seeds is not None else list(base_seeds)
        levels = self.levels if self.axis == Axis.PRETRAIN_MODE else ['all']
        cells = []
        for level in levels:
            for value in self.values:
                same = _same_run(value, level) if self.axis == Axis.PRETRAIN_MODE else None
                if same is not None and same in self.values:
                    _log.debug('%s at the %s level repeats %s, skipping', value, level, same)
                    continue
                for seed in seeds:
                    cells.append({'axis': self.axis.value, 'value': value, 'level': level,
                                  'seed': int(seed),
                                  'overrides': _overrides(self.axis, value, level)})
        return cells


def cell_name(cell):
    "The directory name of a cell's run."
    return '{}-{}-{}-s{}'.format(cell['axis'], cell['value'], cell['level'], cell['seed'])


def _run_cell(cell, base, store_root, out_root):
    cfg = from_dict(ExperimentConfig, base)
    cfg = with_overrides(cfg, cell['overrides']).for_seed(cell['seed'])
    out = Path(out_root) / 'runs' / cell_name(cell)
    _log.info('starting ablation cell %s', cell_name(cell))
    result = Pipeline(cfg, ArtifactStore(store_root)).run(out)
    rec = {'axis': cell['axis'], 'value': cell['value'], 'level': cell['level'],
           'seed': cell['seed'], 'mean_dice': result.report.mean_dice,
           'mean_hd': result.report.mean_hd, 'config_hash': config_hash(cfg),
           'ran': result.ran}
    with open(out / 'run.json', 'w') as f:
        json.dump(rec, f)
    return rec


def summarize_runs(runs):
    """
    Summarize per-run results as per-value mean and standard deviation.

    Args:
        runs(pandas.DataFrame): a frame with the :data:`RUN_COLUMNS`.

    Returns:
        pandas.DataFrame: a frame with the :data:`SUMMARY_COLUMNS`, in first-appearance
        order of the axis values.
    """
    grouped = runs.groupby(['axis', 'value', 'level'], sort=False)
    summary = grouped.agg(n=('seed', 'count'), dice_mean=('mean_dice', 'mean'),
                          dice_std=('mean_dice', 'std'), hd_mean=('mean_hd', 'mean'),
                          hd_std=('mean_hd', 'std'))
    return summary.fillna({'dice_std': 0.0, 'hd_std': 0.0}).reset_index()[SUMMARY_COLUMNS]


class AblationResult:
    """
    The results of an ablation.

    Attributes:
        runs(pandas.DataFrame): one row per (value, level, seed).
        summary(pandas.DataFrame): one row per (value, level) with mean and std.
        path(pathlib.Path): the output directory.
    """

    def __init__(self, runs, summary, path):
        self.runs = runs
        self.summary = summary
        self.path = path

    def table(self):
        "The summary as ``value``-indexed mean ± std strings."
        s = self.summary
        return pd.DataFrame({
            'axis': s['axis'], 'value': s['value'], 'level': s['level'],
            'dice': ['{:.2f} ± {:.2f}'.format(m, sd) for m, sd in zip(s.dice_mean, s.dice_std)],
            'hd': ['{:.3f} ± {:.3f}'.format(m, sd) for m, sd in zip(s.hd_mean, s.hd_std)],
        })


def run_ablation(matrix, base_config, store=None, output_dir=None, *, n_jobs=1,
                 progress=None):
    """
    Run an ablation.

    Args:
        matrix(AblationMatrix): the axis to sweep.
        base_config(samora.config.ExperimentConfig): the configuration being varied.
        store(samora.store.ArtifactStore): the shared cache.
        output_dir: where to write ``runs.csv``, ``summary.csv`` and the cell runs
            (default ``<base output_dir>/ablation-<axis>``).
        n_jobs(int): worker processes (``None`` picks a default; 1 runs in-process).
        progress: a :py:func:`tqdm.tqdm`-compatible progress function.

    Returns:
        AblationResult: the per-run and summary tables.
    """
    if not isinstance(matrix, AblationMatrix):
        matrix = AblationMatrix(matrix)
    store = store or ArtifactStore()
    out = Path(output_dir or Path(base_config.output_dir) / ('ablation-' + matrix.axis.value))
    out.mkdir(parents=True, exist_ok=True)
    cells = matrix.cells(base_config.seeds)
    base = to_dict(base_config)
    _log.info('running %d %s ablation cells', len(cells), matrix.axis.value)

    timer = Stopwatch()
    n = len(cells)
    with invoker(_run_cell, n_jobs) as inv:
        results = inv.map(cells, [base] * n, [str(store.root)] * n, [str(out)] * n)
        if progress is not None:
            results = progress(results, total=n)
        records = list(results)

    runs = pd.DataFrame.from_records(records)
    runs['value'] = runs['value'].astype(str)
    runs = runs[RUN_COLUMNS]
    runs.to_csv(out / 'runs.csv', index=False)
    summary = summarize_runs(runs)
    summary.to_csv(out / 'summary.csv', index=False)
    _log.info('[%s] finished %s ablation in %s', timer, matrix.axis.value, out)
    return AblationResult(runs, summary, out)
