"""
Segmentation data sets: in-memory slice collections, the synthetic hierarchical
data generator, and on-disk slice directories.
"""

import logging
import math
import re
from collections import namedtuple
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from samora.errors import ConfigError, DimensionError, DataError
from samora.util import rng as make_rng, derive_seed

_log = logging.getLogger(__name__)

SegSample = namedtuple('SegSample', ['image', 'mask', 'case_id', 'slice_index'])
SegSample.__doc__ = 'A single 2D slice (named tuple); ``mask`` is ``None`` for unlabeled slices.'
SegSample.image.__doc__ = 'The image raster ``[H, W]``.'
SegSample.mask.__doc__ = 'The integer label raster ``[H, W]`` (0 is background).'
SegSample.case_id.__doc__ = 'The case (volume) identifier.'
SegSample.slice_index.__doc__ = 'The slice position within its case.'

SyntheticData = namedtuple('SyntheticData', ['labeled', 'unlabeled'])
SyntheticData.__doc__ = 'A generated labeled data set and unlabeled corpus (named tuple).'

_SLICE_RE = re.compile(r'^(?P<case>.+?)_slice(?P<slice>\d+)$')


class SegDataset:
    """
    A collection of 2D slices with optional label masks.

    Slices are described by the :attr:`slices` frame, with columns ``case_id``,
    ``slice_index`` and ``split``; row *i* of the frame describes image *i*.

    Args:
        images(numpy.ndarray): ``[N, H, W]`` float images.
        masks(numpy.ndarray or None): ``[N, H, W]`` integer labels.
        slices(pandas.DataFrame): slice descriptions.
        num_classes(int): number of foreground classes.
    """

    def __init__(self, images, masks, slices, num_classes):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 3:
            raise DimensionError('images must be [N, H, W], got {}'.format(images.shape))
        if masks is not None:
            masks = np.asarray(masks, dtype=np.int64)
            if masks.shape != images.shape:
                raise DimensionError('mask shape {} does not match images {}'.format(
                    masks.shape, images.shape))
            if len(masks) and (masks.min() < 0 or masks.max() > num_classes):
                raise ConfigError('mask labels must be in 0..{}'.format(num_classes))
        if len(slices) != len(images):
            raise DimensionError('{} slice rows for {} images'.format(len(slices), len(images)))
        self.images = images
        self.masks = masks
        self.slices = slices.reset_index(drop=True)
        if 'split' not in self.slices.columns:
            self.slices['split'] = 'train'
        self.num_classes = num_classes

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        row = self.slices.iloc[i]
        mask = self.masks[i] if self.masks is not None else None
        return SegSample(self.images[i], mask, row['case_id'], int(row['slice_index']))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def labeled(self):
        return self.masks is not None

    @property
    def image_size(self):
        return self.images.shape[1:]

    def cases(self):
        "The distinct case identifiers, in order of first appearance."
        return list(pd.unique(self.slices['case_id']))

    def subset(self, idx):
        "Select slices by position."
        idx = np.asarray(idx, dtype=np.int64)
        masks = self.masks[idx] if self.masks is not None else None
        return SegDataset(self.images[idx], masks, self.slices.iloc[idx].copy(), self.num_classes)

    def split(self, name):
        "Select the slices of a named split (e.g. ``'train'`` or ``'test'``)."
        return self.subset(np.flatnonzero(self.slices['split'].values == name))

    def unlabeled(self):
        "A copy of this data set without masks."
        return SegDataset(self.images, None, self.slices.copy(), self.num_classes)

    def __str__(self):
        return 'SegDataset({} slices, {} cases, {} classes{})'.format(
            len(self), len(self.cases()), self.num_classes,
            '' if self.labeled else ', unlabeled')


@dataclass
class SyntheticSpec:
    """
    Parameters of the synthetic hierarchical data set.  Each slice has one large
    smooth organ (global structure), a few labeled sub-regions inside it
    (regional structure) and per-class textures (fine structure).

    Attributes:
        num_cases(int): labeled cases.
        test_cases(int): how many of the cases form the test split.
        slices_per_case(int): slices per case.
        num_classes(int): foreground classes (= number of sub-region anchors).
        image_size(int): slice edge.
        organ_scale(float): organ semi-axis as a fraction of the slice edge.
        min_regions(int): fewest sub-regions per slice.
        max_regions(int): most sub-regions per slice.
        texture_noise(float): pixel noise level.
        unlabeled_count(int): size of the unlabeled corpus.
        seed(int): generator seed.
    """
    num_cases: int = 26
    test_cases: int = 6
    slices_per_case: int = 8
    num_classes: int = 4
    image_size: int = 64
    organ_scale: float = 0.42
    min_regions: int = 2
    max_regions: int = 4
    texture_noise: float = 0.03
    unlabeled_count: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.num_cases <= 0 or self.slices_per_case <= 0 or self.num_classes <= 0:
            raise ConfigError('synthetic case, slice and class counts must be positive')
        if not 0 <= self.test_cases < self.num_cases:
            raise ConfigError('data.test_cases must be in [0, num_cases)')
        if self.slices_per_case * 2 < self.num_classes:
            raise ConfigError('need at least {} slices per case to cover {} classes'.format(
                math.ceil(self.num_classes / 2), self.num_classes))
        if self.min_regions < 1 or self.min_regions > self.max_regions:
            raise ConfigError('invalid sub-region count range')
        if not 0 < self.organ_scale < 0.5:
            raise ConfigError('data.organ_scale must be in (0, 0.5)')

    @property
    def region_counts(self):
        "The possible numbers of sub-regions per slice."
        lo = min(self.min_regions, self.num_classes)
        hi = min(self.max_regions, self.num_classes)
        return np.arange(lo, hi + 1)

    def region_radius(self, c):
        "Nominal semi-major axis (pixels) of class ``c`` (1-based)."
        C = self.num_classes
        shrink = 0.5 * (c - 1) / (C - 1) if C > 1 else 0.0
        return 0.10 * self.image_size * (1 - shrink)

    def target_fractions(self):
        """
        Expected pixel proportion of each label (background first).

        >>> f = SyntheticSpec().target_fractions()
        >>> float(round(f.sum(), 6))
        1.0
        """
        C = self.num_classes
        presence = self.region_counts.mean() / C
        # E[j²] for j ~ U[0.8, 1.2]
        ej2 = (1.2 ** 3 - 0.8 ** 3) / (3 * 0.4)
        area = self.image_size ** 2
        fg = np.array([
            presence * math.pi * 0.75 * self.region_radius(c) ** 2 * ej2 / area
            for c in range(1, C + 1)
        ])
        return np.concatenate([[1 - fg.sum()], fg])


def _ellipse(yy, xx, cy, cx, a, b, angle):
    ca, sa = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / a) ** 2 + (v / b) ** 2 <= 1


def _case_geometry(spec, case_rng):
    W = spec.image_size
    return {
        'cy': W / 2 + case_rng.uniform(-2, 2),
        'cx': W / 2 + case_rng.uniform(-2, 2),
        'a': spec.organ_scale * W * case_rng.uniform(0.95, 1.05),
        'angle': case_rng.uniform(-0.3, 0.3),
        'phase': case_rng.uniform(0, 2 * math.pi),
        'organ_level': case_rng.uniform(0.35, 0.45),
    }


def _class_texture(spec, c, yy, xx):
    W = spec.image_size
    freq = 4 + 3 * c
    phi = math.pi * c / (spec.num_classes + 1)
    wave = np.sin(2 * math.pi * freq * (xx * math.cos(phi) + yy * math.sin(phi)) / W)
    return 0.5 + 0.35 * c / spec.num_classes + 0.05 * wave


def _render_slice(spec, geo, k, slice_rng):
    W = spec.image_size
    C = spec.num_classes
    S = spec.slices_per_case
    yy, xx = np.mgrid[0:W, 0:W].astype(np.float64)

    # organ grows and shrinks along the volume
    pos = math.sin(math.pi * (k + 1) / (S + 1))
    a = geo['a'] * (0.9 + 0.1 * pos)
    b = 0.8 * a
    organ = _ellipse(yy, xx, geo['cy'], geo['cx'], a, b, geo['angle'])

    grad = 0.05 * (xx - geo['cx']) / W
    image = np.full((W, W), 0.1) + 0.02 * (yy / W)
    image[organ] = geo['organ_level'] + grad[organ]
    mask = np.zeros((W, W), dtype=np.int64)

    # coverage sweep: two rotating classes per slice, random extras
    cover = {(2 * k) % C + 1, (2 * k + 1) % C + 1}
    n_regions = max(int(slice_rng.choice(spec.region_counts)), len(cover))
    rest = [c for c in range(1, C + 1) if c not in cover]
    extra = slice_rng.permutation(rest)[:max(n_regions - len(cover), 0)]
    present = sorted(cover | set(int(c) for c in extra))

    ca, sa = math.cos(geo['angle']), math.sin(geo['angle'])
    for c in present:
        t = geo['phase'] + 2 * math.pi * (c - 1) / C
        ox, oy = 0.5 * a * math.cos(t), 0.5 * b * math.sin(t)
        cx = geo['cx'] + ox * ca - oy * sa + slice_rng.uniform(-1, 1)
        cy = geo['cy'] + ox * sa + oy * ca + slice_rng.uniform(-1, 1)
        r = spec.region_radius(c) * slice_rng.uniform(0.8, 1.2)
        region = _ellipse(yy, xx, cy, cx, r, 0.75 * r, slice_rng.uniform(0, math.pi)) & organ
        mask[region] = c
        image[region] = _class_texture(spec, c, yy, xx)[region]

    image = image + slice_rng.normal(0, spec.texture_noise, size=image.shape)
    return np.clip(image, 0, 1).astype(np.float32), mask


def generate_synthetic(spec, seed=None):
    """
    Generate the synthetic labeled data set and unlabeled corpus.  Generation is a
    pure function of ``(spec, seed)``; every slice draws from its own derived
    random stream.

    Args:
        spec(SyntheticSpec): the data set parameters.
        seed(int or None): overrides ``spec.seed``.

    Returns:
        SyntheticData: the labeled set (with ``train``/``test`` splits by case) and
        the unlabeled corpus.
    """
    seed = spec.seed if seed is None else seed
    _log.info('generating %d synthetic cases of %d slices (seed %d)',
              spec.num_cases, spec.slices_per_case, seed)
    images, masks, rows = [], [], []
    n_train = spec.num_cases - spec.test_cases
    for case in range(spec.num_cases):
        geo = _case_geometry(spec, make_rng(derive_seed('case', case, base=seed)))
        cid = 'case{:03d}'.format(case)
        for k in range(spec.slices_per_case):
            srng = make_rng(derive_seed('slice', case, k, base=seed))
            img, msk = _render_slice(spec, geo, k, srng)
            images.append(img)
            masks.append(msk)
            rows.append((cid, k, 'train' if case < n_train else 'test'))
    slices = pd.DataFrame.from_records(rows, columns=['case_id', 'slice_index', 'split'])
    labeled = SegDataset(np.stack(images), np.stack(masks), slices, spec.num_classes)

    u_images, u_rows = [], []
    for u in range(spec.unlabeled_count):
        case = u // spec.slices_per_case
        k = u % spec.slices_per_case
        geo = _case_geometry(spec, make_rng(derive_seed('unlabeled-case', case, base=seed)))
        srng = make_rng(derive_seed('unlabeled', case, k, base=seed))
        img, _ = _render_slice(spec, geo, k, srng)
        u_images.append(img)
        u_rows.append(('unl{:03d}'.format(case), k, 'unlabeled'))
    if u_images:
        u_arr = np.stack(u_images)
    else:
        u_arr = np.zeros((0, spec.image_size, spec.image_size), dtype=np.float32)
    u_slices = pd.DataFrame.from_records(u_rows, columns=['case_id', 'slice_index', 'split'])
    unlabeled = SegDataset(u_arr, None, u_slices, spec.num_classes)
    return SyntheticData(labeled, unlabeled)


def _slice_name(case_id, slice_index):
    return '{}_slice{:03d}'.format(case_id, int(slice_index))


def save_dataset(data, path):
    """
    Write a data set as a slice directory: ``<case>_sliceKKK.img`` (little-endian
    float32) and ``<case>_sliceKKK.msk`` (uint8) rasters plus ``manifest.csv``.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W = data.image_size
    man = data.slices.copy()
    man['name'] = [_slice_name(c, s) for (c, s) in zip(man['case_id'], man['slice_index'])]
    man['height'] = H
    man['width'] = W
    man['num_classes'] = data.num_classes
    man['has_mask'] = data.labeled
    for i, name in enumerate(man['name']):
        data.images[i].astype('<f4').tofile(path / (name + '.img'))
        if data.labeled:
            data.masks[i].astype(np.uint8).tofile(path / (name + '.msk'))
    man.to_csv(path / 'manifest.csv', index=False)
    _log.info('saved %s to %s', data, path)


def load_dataset(path):
    "Load a slice directory written by :func:`save_dataset`."
    path = Path(path)
    man = pd.read_csv(path / 'manifest.csv', dtype={'case_id': str})
    if man.empty:
        raise DataError('{} lists no slices'.format(path / 'manifest.csv'))
    images, masks = [], []
    for row in man.itertuples():
        shape = (int(row.height), int(row.width))
        img = np.fromfile(path / (row.name + '.img'), dtype='<f4')
        if img.size != shape[0] * shape[1]:
            raise DimensionError('{}.img has {} values, expected {}'.format(
                row.name, img.size, shape[0] * shape[1]))
        images.append(img.reshape(shape))
        if row.has_mask:
            masks.append(np.fromfile(path / (row.name + '.msk'), dtype=np.uint8).reshape(shape))
    C = int(man['num_classes'].iloc[0])
    slices = man[['case_id', 'slice_index', 'split']].copy()
    return SegDataset(np.stack(images), np.stack(masks) if masks else None, slices, C)


def load_raster_dir(path, num_classes, *, split='train'):
    """
    Load a directory of portable grayscale rasters (PGM or PNG).  Images live in
    ``images/`` and optional masks with the same file names in ``masks/``.  File
    stems of the form ``<case>_slice<k>`` set case and slice; other stems become
    single-slice cases.  Intensities are scaled to ``[0, 1]``.
    """
    from PIL import Image

    path = Path(path)
    img_dir = path / 'images'
    if not img_dir.is_dir():
        img_dir = path
    files = sorted(f for f in img_dir.iterdir() if f.suffix.lower() in ('.pgm', '.png'))
    if not files:
        raise DataError('no PGM or PNG rasters in {}'.format(img_dir))
    mask_dir = path / 'masks'
    images, masks, rows = [], [], []
    for f in files:
        with Image.open(f) as im:
            arr = np.asarray(im.convert('I'), dtype=np.float64)
        hi = arr.max()
        images.append((arr / hi if hi > 0 else arr).astype(np.float32))
        mf = mask_dir / f.name
        if mask_dir.is_dir():
            with Image.open(mf) as im:
                masks.append(np.asarray(im, dtype=np.int64))
        m = _SLICE_RE.match(f.stem)
        if m:
            rows.append((m.group('case'), int(m.group('slice')), split))
        else:
            rows.append((f.stem, 0, split))
    _log.info('loaded %d rasters from %s', len(images), path)
    slices = pd.DataFrame.from_records(rows, columns=['case_id', 'slice_index', 'split'])
    return SegDataset(np.stack(images), np.stack(masks) if masks else None, slices, num_classes)
