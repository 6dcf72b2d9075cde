"""
Segmentation overlap and boundary-distance metrics.

Empty-mask conventions: when both masks are empty, Dice is 1 and the Hausdorff
distance 0; when exactly one is empty, Dice is 0 and the Hausdorff distance is
the diagonal of the (spacing-scaled) raster.
"""

import logging

import numpy as np
from numba import njit
from scipy import ndimage

from samora.errors import DimensionError

_log = logging.getLogger(__name__)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.bool_)
    gt = np.asarray(gt, dtype=np.bool_)
    if pred.shape != gt.shape:
        raise DimensionError('mask shapes differ: {} vs {}'.format(pred.shape, gt.shape))
    return pred, gt


def dice(pred, gt):
    """
    Compute the Dice coefficient :math:`2|A \\cap B| / (|A| + |B|)`.

    Args:
        pred(numpy.ndarray): the predicted binary mask.
        gt(numpy.ndarray): the ground-truth binary mask.

    Returns:
        double: the Dice coefficient in :math:`[0, 1]`.

    >>> dice([1, 1, 1, 0, 0, 0], [0, 1, 1, 1, 1, 1])
    0.5
    """
    pred, gt = _check_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / total


def class_dice(pred, gt, num_classes):
    """
    Per-class Dice of two label rasters.

    Returns:
        numpy.ndarray: Dice for classes ``1..num_classes``.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    return np.array([dice(pred == c, gt == c) for c in range(1, num_classes + 1)])


def boundary(mask):
    """
    The boundary voxels of a binary mask: mask voxels with at least one
    (fully-connected) neighbor outside the mask.
    """
    mask = np.asarray(mask, dtype=np.bool_)
    if not mask.any():
        return mask
    struct = ndimage.generate_binary_structure(mask.ndim, mask.ndim)
    inner = ndimage.binary_erosion(mask, struct, border_value=0)
    return mask & ~inner


@njit(nogil=True)
def _directed_distances(src, dst):
    n = src.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(dst.shape[0]):
            d = 0.0
            for k in range(src.shape[1]):
                diff = src[i, k] - dst[j, k]
                d += diff * diff
            if d < best:
                best = d
        out[i] = np.sqrt(best)
    return out


def _diagonal(shape, spacing):
    return float(np.sqrt(np.sum((np.asarray(shape) * spacing) ** 2)))


def hausdorff(pred, gt, spacing=None, percentile=None):
    """
    Symmetric Hausdorff distance between the boundaries of two masks.

    Args:
        pred(numpy.ndarray): the predicted binary mask (2D or 3D).
        gt(numpy.ndarray): the ground-truth binary mask.
        spacing: voxel spacing per axis (default 1).
        percentile(float):
            if given (e.g. 95), use that percentile of each directed distance set
            instead of the maximum.

    Returns:
        double: the distance in spacing units.
    """
    pred, gt = _check_pair(pred, gt)
    if spacing is None:
        spacing = np.ones(pred.ndim)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,):
        raise DimensionError('spacing needs {} values'.format(pred.ndim))

    pe = pred.any()
    ge = gt.any()
    if not pe and not ge:
        return 0.0
    elif not pe or not ge:
        return _diagonal(pred.shape, spacing)

    a = np.argwhere(boundary(pred)).astype(np.float64) * spacing
    b = np.argwhere(boundary(gt)).astype(np.float64) * spacing
    ab = _directed_distances(a, b)
    ba = _directed_distances(b, a)
    if percentile is None:
        return float(max(ab.max(), ba.max()))
    return float(max(np.percentile(ab, percentile), np.percentile(ba, percentile)))


def avg_hausdorff(volumes, spacing=None, percentile=None):
    """
    Mean Hausdorff distance over a list of volumes.

    Args:
        volumes: a list of ``(pred, gt)`` mask pairs.

    Returns:
        double: the mean distance.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError('need at least one volume')
    dists = [hausdorff(p, g, spacing, percentile) for (p, g) in volumes]
    return float(np.mean(dists))


def psnr(pred, target, data_range=1.0):
    """
    Peak signal-to-noise ratio in dB.

    >>> psnr([0.0, 0.5], [0.0, 0.5])
    inf
    >>> round(psnr([0.1, 0.1], [0.0, 0.0]), 6)
    20.0
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError('image shapes differ: {} vs {}'.format(pred.shape, target.shape))
    mse = np.mean(np.square(pred - target))
    if mse == 0:
        return float('inf')
    return float(10 * np.log10(data_range ** 2 / mse))
