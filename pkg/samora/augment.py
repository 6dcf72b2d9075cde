"""
Slice preprocessing and data augmentation.

Augmentation draws its parameters from a random stream derived from
``(seed, sample index)``, so an augmented sample never depends on which worker
produces it or in what order.
"""

import logging
import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from samora.errors import ConfigError
from samora.util import rng as make_rng, derive_seed
from .datasets import SegSample

_log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8

AugmentParams = namedtuple('AugmentParams', [
    'angle', 'scale', 'flip_h', 'flip_v', 'contrast', 'brightness', 'elastic_seed'
])
AugmentParams.__doc__ = 'Concrete parameters of one augmentation draw (named tuple).'

IDENTITY = AugmentParams(0.0, 1.0, False, False, 1.0, 0.0, None)


@dataclass
class AugmentConfig:
    """
    Augmentation ranges.

    Attributes:
        rotation(list): rotation range in degrees.
        flip_prob(float): probability of flipping along each axis.
        scale(list): isotropic scaling range.
        elastic_alpha(float): elastic displacement magnitude (pixels).
        elastic_sigma(float): elastic displacement smoothing (pixels).
        contrast(list): contrast factor range.
        brightness(list): brightness offset range.
        seed(int): augmentation seed.
    """
    rotation: list = field(default_factory=lambda: [-15.0, 15.0])
    flip_prob: float = 0.5
    scale: list = field(default_factory=lambda: [0.9, 1.1])
    elastic_alpha: float = 10.0
    elastic_sigma: float = 4.0
    contrast: list = field(default_factory=lambda: [0.8, 1.2])
    brightness: list = field(default_factory=lambda: [-0.1, 0.1])
    seed: int = 0

    def __post_init__(self):
        for name in ['rotation', 'scale', 'contrast', 'brightness']:
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError('augment.{} range is empty'.format(name))
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError('augment.flip_prob must be a probability')
        if self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ConfigError('invalid elastic deformation parameters')


def zscore(image):
    """
    Normalize an image to zero mean and unit variance; a constant image maps to
    zeros.

    >>> float(zscore(np.full((3, 3), 7.0)).max())
    0.0
    """
    image = np.asarray(image, dtype=np.float64)
    sd = max(image.std(), SIGMA_FLOOR)
    return (image - image.mean()) / sd


def resize(raster, size, order=1):
    "Resize a 2D raster to ``size × size`` with spline interpolation of ``order``."
    h, w = raster.shape
    if (h, w) == (size, size):
        return raster
    return ndimage.zoom(raster, (size / h, size / w), order=order, mode='nearest',
                        grid_mode=True)


def preprocess(sample, size=None):
    """
    Prepare a raw slice: resize it to the configured resolution (masks by nearest
    neighbor) and z-score normalize the image.

    Args:
        sample(SegSample or numpy.ndarray): a raw slice, or a bare image.
        size(int or None): target edge length; ``None`` keeps the slice size.

    Returns:
        SegSample: the preprocessed slice (float32 image).
    """
    if not isinstance(sample, SegSample):
        sample = SegSample(sample, None, None, 0)
    image = np.asarray(sample.image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError('raw slice has non-finite intensities')
    mask = sample.mask
    if size is not None:
        image = resize(image, size, order=1)
        if mask is not None:
            mask = resize(np.asarray(mask), size, order=0)
    return sample._replace(image=zscore(image).astype(np.float32), mask=mask)


def draw_params(cfg, rng):
    "Draw one set of augmentation parameters."
    return AugmentParams(
        angle=float(rng.uniform(*cfg.rotation)),
        scale=float(rng.uniform(*cfg.scale)),
        flip_h=bool(rng.random() < cfg.flip_prob),
        flip_v=bool(rng.random() < cfg.flip_prob),
        contrast=float(rng.uniform(*cfg.contrast)),
        brightness=float(rng.uniform(*cfg.brightness)),
        elastic_seed=int(rng.integers(2 ** 31)) if cfg.elastic_alpha > 0 else None,
    )


def _sample_coordinates(shape, params, cfg):
    h, w = shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = math.radians(params.angle)
    ct, st = math.cos(t), math.sin(t)
    # inverse map: output pixel -> input location
    dy, dx = (yy - cy) / params.scale, (xx - cx) / params.scale
    src_y = cy + ct * dy - st * dx
    src_x = cx + st * dy + ct * dx
    if params.elastic_seed is not None and cfg.elastic_alpha > 0:
        erng = np.random.default_rng(params.elastic_seed)
        ey = ndimage.gaussian_filter(erng.uniform(-1, 1, shape), cfg.elastic_sigma)
        ex = ndimage.gaussian_filter(erng.uniform(-1, 1, shape), cfg.elastic_sigma)
        src_y = src_y + cfg.elastic_alpha * ey
        src_x = src_x + cfg.elastic_alpha * ex
    return np.stack([src_y, src_x])


def apply_augment(sample, params, cfg=None):
    """
    Apply concrete augmentation parameters.  The same geometric transform is
    applied to image and mask (the mask by nearest neighbor, filling with
    background); contrast and brightness apply to the image only.
    """
    cfg = cfg or AugmentConfig()
    image = np.asarray(sample.image, dtype=np.float64)
    mask = sample.mask
    geometric = params.angle != 0 or params.scale != 1 or params.elastic_seed is not None
    if geometric:
        coords = _sample_coordinates(image.shape, params, cfg)
        image = ndimage.map_coordinates(image, coords, order=1, mode='nearest')
        if mask is not None:
            mask = ndimage.map_coordinates(np.asarray(mask), coords, order=0,
                                           mode='constant', cval=0)
    if params.flip_h:
        image = np.flip(image, axis=1)
        mask = np.flip(mask, axis=1) if mask is not None else None
    if params.flip_v:
        image = np.flip(image, axis=0)
        mask = np.flip(mask, axis=0) if mask is not None else None

    if params.contrast != 1 or params.brightness != 0:
        mean = image.mean()
        image = (image - mean) * params.contrast + mean + params.brightness
    if mask is not None:
        mask = np.ascontiguousarray(mask)
    return sample._replace(image=np.ascontiguousarray(image, dtype=np.float32), mask=mask)


def augment(sample, cfg, seed=None, index=None):
    """
    Randomly augment a preprocessed sample.

    Args:
        sample(SegSample): the sample.
        cfg(AugmentConfig): augmentation ranges.
        seed: base seed (defaults to ``cfg.seed``).
        index: sample key(s) mixed into the seed (e.g. ``(epoch, i)``).

    Returns:
        SegSample: the augmented sample.
    """
    seed = cfg.seed if seed is None else seed
    if index is None:
        keys = ()
    elif isinstance(index, tuple):
        keys = index
    else:
        keys = (index,)
    params = draw_params(cfg, make_rng(derive_seed('augment', *keys, base=seed)))
    return apply_augment(sample, params, cfg)


def augment_batch(images, masks, cfg, seed, keys):
    """
    Augment a batch of arrays, one derived stream per key.

    Args:
        images(numpy.ndarray): ``[B, H, W]`` images.
        masks(numpy.ndarray or None): ``[B, H, W]`` masks.
        cfg(AugmentConfig): augmentation ranges.
        seed: base seed.
        keys(list): one key (or key tuple) per sample.

    Returns:
        tuple: augmented ``(images, masks)``.
    """
    out_i, out_m = [], []
    for j, key in enumerate(keys):
        s = SegSample(images[j], masks[j] if masks is not None else None, None, 0)
        a = augment(s, cfg, seed, key)
        out_i.append(a.image)
        out_m.append(a.mask)
    return np.stack(out_i), (np.stack(out_m) if masks is not None else None)
