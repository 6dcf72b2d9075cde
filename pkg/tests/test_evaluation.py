import numpy as np
import pandas as pd

from samora.datasets import SegDataset
from samora.errors import ProtocolError, DimensionError
from samora.evaluation import (
    EvalConfig, group_volumes, evaluate_predictions, evaluate_volumes, MetricsReport
)
from samora.metrics import dice, hausdorff

from pytest import approx, raises


def _dataset(rng, cases=('a', 'b', 'c'), n_slices=3, size=8, classes=2, shuffle=True):
    rows = [(c, k, 'test') for c in cases for k in range(n_slices)]
    slices = pd.DataFrame.from_records(rows, columns=['case_id', 'slice_index', 'split'])
    if shuffle:
        slices = slices.iloc[rng.permutation(len(slices))]
    n = len(slices)
    masks = rng.integers(0, classes + 1, (n, size, size))
    images = rng.random((n, size, size))
    return SegDataset(images, masks, slices, classes)


def _brute_report(ds, pred):
    rows = []
    for case in ds.cases():
        sel = np.flatnonzero(ds.slices['case_id'].values == case)
        sel = sel[np.argsort(ds.slices['slice_index'].values[sel])]
        for c in range(1, ds.num_classes + 1):
            p = pred[sel] == c
            t = ds.masks[sel] == c
            rows.append((case, c, 100 * dice(p, t), hausdorff(p, t)))
    pv = pd.DataFrame.from_records(rows, columns=['case_id', 'class', 'dice', 'hd'])
    per_class = pv.groupby('class')[['dice', 'hd']].mean()
    return pv, per_class['dice'].mean(), per_class['hd'].mean()


def test_group_sorts_slices(rng):
    ds = _dataset(rng)
    groups = group_volumes(ds, ds.masks)
    assert len(groups) == 3
    for g in groups:
        assert list(g.slice_index) == [0, 1, 2]
        sel = (ds.slices['case_id'] == g.case_id).values
        order = np.argsort(ds.slices['slice_index'].values[sel])
        assert np.array_equal(g.gt, ds.masks[sel][order])


def test_group_missing_slice(rng):
    ds = _dataset(rng, shuffle=False)
    keep = np.flatnonzero(~((ds.slices['case_id'] == 'b') & (ds.slices['slice_index'] == 1)))
    sub = ds.subset(keep)
    with raises(ProtocolError, match='missing'):
        group_volumes(sub, sub.masks)


def test_group_duplicate_slice(rng):
    ds = _dataset(rng, shuffle=False)
    sub = ds.subset(np.concatenate([np.arange(len(ds)), [0]]))
    with raises(ProtocolError, match='duplicate'):
        group_volumes(sub, sub.masks)


def test_group_unlabeled(rng):
    ds = _dataset(rng).unlabeled()
    with raises(ProtocolError):
        group_volumes(ds, np.zeros((len(ds), 8, 8)))


def test_group_bad_shape(rng):
    ds = _dataset(rng)
    with raises(DimensionError):
        group_volumes(ds, np.zeros((len(ds), 4, 4)))


def test_perfect_predictions(rng):
    ds = _dataset(rng)
    rep = evaluate_predictions(ds, ds.masks)
    assert rep.mean_dice == approx(100.0)
    assert rep.mean_hd == approx(0.0)
    assert len(rep.per_volume) == 3 * 2


def test_brute_force(rng):
    for _ in range(5):
        ds = _dataset(rng)
        pred = rng.integers(0, 3, ds.masks.shape)
        rep = evaluate_predictions(ds, pred)
        pv, md, mh = _brute_report(ds, pred)
        merged = rep.per_volume.merge(pv, on=['case_id', 'class'], suffixes=('', '_bf'))
        assert len(merged) == len(pv)
        assert merged['dice'].values == approx(merged['dice_bf'].values)
        assert merged['hd'].values == approx(merged['hd_bf'].values)
        assert rep.mean_dice == approx(md)
        assert rep.mean_hd == approx(mh)


def test_volume_not_slice_average(rng):
    # one class present on a single slice: a slice average would count empty slices
    ds = _dataset(rng, cases=('a',), classes=1, shuffle=False)
    ds.masks[:] = 0
    ds.masks[0, 2:4, 2:4] = 1
    pred = np.zeros_like(ds.masks)
    pred[0, 2:4, 2:3] = 1
    rep = evaluate_predictions(ds, pred)
    assert rep.mean_dice == approx(100 * 2 * 2 / 6)


def test_percentile_variant(rng):
    ds = _dataset(rng)
    pred = rng.integers(0, 3, ds.masks.shape)
    rep = evaluate_predictions(ds, pred, EvalConfig(hd_percentile=95))
    assert rep.hd_variant == 'HD95'
    full = evaluate_predictions(ds, pred)
    assert full.hd_variant == 'max'
    assert rep.mean_hd <= full.mean_hd + 1e-9


def test_spacing(rng):
    ds = _dataset(rng)
    pred = rng.integers(0, 3, ds.masks.shape)
    unit = evaluate_predictions(ds, pred)
    double = evaluate_predictions(ds, pred, EvalConfig(spacing=[2.0, 2.0, 2.0]))
    assert double.mean_hd == approx(2 * unit.mean_hd)
    assert double.mean_dice == approx(unit.mean_dice)


def test_evaluate_callable(rng):
    ds = _dataset(rng)
    truth = {tuple(img.ravel()[:4]): m for (img, m) in zip(ds.images, ds.masks)}

    def model(images):
        return np.stack([truth[tuple(img.ravel()[:4])] for img in images])

    rep = evaluate_volumes(model, ds, seed=4, config_hash='abc')
    assert rep.mean_dice == approx(100.0)
    assert rep.seed == 4


def test_evaluate_missing_slices(rng):
    ds = _dataset(rng, shuffle=False)
    sub = ds.subset(np.delete(np.arange(len(ds)), 1))
    with raises(ProtocolError):
        evaluate_volumes(lambda imgs: np.zeros(imgs.shape, dtype=np.int64), sub)


def test_report_table(rng):
    ds = _dataset(rng)
    rep = evaluate_predictions(ds, rng.integers(0, 3, ds.masks.shape))
    t = rep.table()
    assert list(t.columns) == ['class', 'dice', 'hd']
    assert list(t['class']) == ['1', '2', 'mean']
    assert t['dice'].iloc[-1] == approx(rep.mean_dice)
    assert 'mean Dice' in rep.summary()


def test_report_save_load(rng, tmp_path):
    ds = _dataset(rng)
    rep = evaluate_predictions(ds, rng.integers(0, 3, ds.masks.shape),
                               EvalConfig(hd_percentile=95), seed=7, config_hash='f00d')
    rep.save(tmp_path / 'report')
    for name in ['metrics.csv', 'volumes.csv', 'summary.txt']:
        assert (tmp_path / 'report' / name).exists()
    back = MetricsReport.load(tmp_path / 'report')
    assert back.mean_dice == approx(rep.mean_dice)
    assert back.mean_hd == approx(rep.mean_hd)
    assert back.hd_variant == 'HD95'
    assert back.config_hash == 'f00d'
    assert back.seed == '7'
