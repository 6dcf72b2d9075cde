"""
Volume-level evaluation of segmentation models.

Test slices are grouped into volumes by case; Dice and Hausdorff distance are
computed on the stacked 3D masks of each volume, averaged over volumes and then
over classes.
"""

import logging
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from samora.errors import ProtocolError, DimensionError
from samora.metrics import dice, hausdorff
from samora.util import Stopwatch
from samora.finetune import predict_labels
from samora.pretext.data import normalized

_log = logging.getLogger(__name__)

VolumeGroup = namedtuple('VolumeGroup', ['case_id', 'slice_index', 'pred', 'gt'])
VolumeGroup.__doc__ = 'The ordered predicted and ground-truth slices of one case (named tuple).'
VolumeGroup.slice_index.__doc__ = 'The slice indices, strictly increasing.'
VolumeGroup.pred.__doc__ = 'The predicted label volume ``[S, H, W]``.'
VolumeGroup.gt.__doc__ = 'The ground-truth label volume ``[S, H, W]``.'

REPORT_COLUMNS = ['class', 'dice', 'hd']


@dataclass
class EvalConfig:
    """
    Evaluation settings.

    Attributes:
        spacing(list): voxel spacing ``(slice, row, column)``; ``None`` for unit spacing.
        hd_percentile(float):
            use this percentile of boundary distances (e.g. 95) instead of the
            maximum.
        batch_size(int): prediction batch size.
    """
    spacing: list = None
    hd_percentile: float = None
    batch_size: int = 16

    @property
    def hd_variant(self):
        if self.hd_percentile is None:
            return 'max'
        return 'HD{:g}'.format(self.hd_percentile)


def group_volumes(dataset, predictions):
    """
    Group slice predictions into volumes.

    Args:
        dataset(samora.datasets.SegDataset): the labeled test slices.
        predictions(numpy.ndarray): ``[N, H, W]`` predicted labels aligned with ``dataset``.

    Returns:
        list: the :class:`VolumeGroup` objects, in case order.

    Raises:
        ProtocolError: if a volume has missing or duplicate slices.
    """
    predictions = np.asarray(predictions)
    if not dataset.labeled:
        raise ProtocolError('evaluation requires ground-truth masks')
    if predictions.shape != dataset.masks.shape:
        raise DimensionError('predictions {} do not match masks {}'.format(
            predictions.shape, dataset.masks.shape))
    groups = []
    slices = dataset.slices
    for case, frame in slices.groupby('case_id', sort=False):
        idx = frame.index.values
        si = frame['slice_index'].values
        order = np.argsort(si, kind='stable')
        idx, si = idx[order], si[order]
        if len(np.unique(si)) != len(si):
            raise ProtocolError('case {} has duplicate slices'.format(case))
        expected = np.arange(si[0], si[0] + len(si))
        if not np.array_equal(si, expected):
            missing = np.setdiff1d(np.arange(si[0], si[-1] + 1), si)
            raise ProtocolError('case {} is missing slices {}'.format(case, missing.tolist()))
        groups.append(VolumeGroup(case, si, predictions[idx], dataset.masks[idx]))
    return groups


class MetricsReport:
    """
    Evaluation results.

    Attributes:
        per_volume(pandas.DataFrame):
            one row per (case, class) with columns ``case_id``, ``class``, ``dice``
            (percent) and ``hd``.
        per_class(pandas.DataFrame): per-class ``dice`` and ``hd`` averaged over volumes.
        mean_dice(double): mean of the per-class Dice values (percent).
        mean_hd(double): mean of the per-class Hausdorff distances.
        hd_variant(str): ``max`` or the percentile variant used.
        seed: the run seed.
        config_hash(str): the configuration hash.
    """

    def __init__(self, per_volume, hd_variant='max', seed=None, config_hash=None):
        self.per_volume = per_volume
        self.per_class = per_volume.groupby('class')[['dice', 'hd']].mean()
        self.mean_dice = float(self.per_class['dice'].mean())
        self.mean_hd = float(self.per_class['hd'].mean())
        self.hd_variant = hd_variant
        self.seed = seed
        self.config_hash = config_hash

    def table(self):
        "One row per class plus a ``mean`` summary row."
        t = self.per_class.reset_index()
        t['class'] = t['class'].astype(str)
        summary = pd.DataFrame({'class': ['mean'], 'dice': [self.mean_dice],
                                'hd': [self.mean_hd]})
        return pd.concat([t, summary], ignore_index=True)[REPORT_COLUMNS]

    def summary(self):
        "A human-readable summary."
        lines = ['mean Dice: {:.2f}%'.format(self.mean_dice),
                 'mean HD ({}): {:.3f}'.format(self.hd_variant, self.mean_hd),
                 'volumes: {}'.format(self.per_volume['case_id'].nunique()),
                 'empty masks: Dice 1 / HD 0 if both empty, Dice 0 / HD diagonal if one']
        for row in self.per_class.itertuples():
            lines.append('  class {}: Dice {:.2f}%, HD {:.3f}'.format(row.Index, row.dice, row.hd))
        lines.append('seed: {}'.format(self.seed))
        lines.append('config hash: {}'.format(self.config_hash))
        return '\n'.join(lines)

    def save(self, path):
        """
        Write ``metrics.csv``, ``volumes.csv`` and ``summary.txt`` to a directory.
        """
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.table().to_csv(path / 'metrics.csv', index=False)
        self.per_volume.to_csv(path / 'volumes.csv', index=False)
        (path / 'summary.txt').write_text(self.summary() + '\n')

    @classmethod
    def load(cls, path):
        "Load a report saved with :meth:`save`."
        path = Path(path)
        pv = pd.read_csv(path / 'volumes.csv', dtype={'case_id': str})
        meta = {}
        for line in (path / 'summary.txt').read_text().splitlines():
            if ': ' in line and not line.startswith(' '):
                k, v = line.split(': ', 1)
                meta[k] = v
        variant = 'max'
        for k in meta:
            if k.startswith('mean HD ('):
                variant = k[len('mean HD ('):-1]
        return cls(pv, variant, meta.get('seed'), meta.get('config hash'))

    def __str__(self):
        return 'MetricsReport(Dice {:.2f}%, HD {:.3f})'.format(self.mean_dice, self.mean_hd)


def evaluate_predictions(dataset, predictions, cfg=None, *, seed=None, config_hash=None):
    """
    Evaluate predicted label rasters against a labeled data set.

    Args:
        dataset(samora.datasets.SegDataset): the labeled test slices.
        predictions(numpy.ndarray): predicted labels aligned with ``dataset``.
        cfg(EvalConfig): evaluation settings.

    Returns:
        MetricsReport: the report.
    """
    cfg = cfg or EvalConfig()
    groups = group_volumes(dataset, predictions)
    rows = []
    for g in groups:
        for c in range(1, dataset.num_classes + 1):
            p = g.pred == c
            t = g.gt == c
            rows.append((g.case_id, c, 100 * dice(p, t),
                         hausdorff(p, t, cfg.spacing, cfg.hd_percentile)))
    pv = pd.DataFrame.from_records(rows, columns=['case_id', 'class', 'dice', 'hd'])
    return MetricsReport(pv, cfg.hd_variant, seed, config_hash)


def evaluate_volumes(model, dataset, cfg=None, *, seed=None, config_hash=None):
    """
    Evaluate a segmentation model on complete test volumes.

    Args:
        model: a segmentation model mapping ``[B, 1, H, W]`` normalized images to
            logits, or a callable mapping ``[N, H, W]`` raw images to labels.
        dataset(samora.datasets.SegDataset): the labeled test slices.
        cfg(EvalConfig): evaluation settings.

    Returns:
        MetricsReport: the report.

    Raises:
        ProtocolError: if a test volume has missing slices.
    """
    cfg = cfg or EvalConfig()
    if not dataset.labeled:
        raise ProtocolError('evaluation requires ground-truth masks')
    group_volumes(dataset, dataset.masks)
    timer = Stopwatch()
    if isinstance(model, torch.nn.Module):
        pred = predict_labels(model, normalized(dataset.images), cfg.batch_size)
    else:
        pred = np.asarray(model(dataset.images))
    report = evaluate_predictions(dataset, pred, cfg, seed=seed, config_hash=config_hash)
    _log.info('[%s] evaluated %d slices: %s', timer, len(dataset), report)
    return report
