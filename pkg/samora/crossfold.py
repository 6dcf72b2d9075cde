"""
Data set splitting: the case-stratified few-shot slice sample.
"""

from collections import namedtuple
import logging

import numpy as np

from . import util

FewShotPair = namedtuple('FewShotPair', ['labeled', 'remainder'])
FewShotPair.__doc__ = 'Few-shot split (named tuple).'
FewShotPair.labeled.__doc__ = 'The sampled labeled slices.'
FewShotPair.remainder.__doc__ = 'The slices not sampled.'

_logger = logging.getLogger(__name__)

_EPS = 1e-9


def fewshot_count(n_slices, fraction):
    """
    Number of slices sampled for a few-shot fraction, :math:`\\lfloor fN \\rfloor`.

    >>> fewshot_count(2212, 0.10)
    221
    """
    return int(np.floor(fraction * n_slices + _EPS))


def _largest_remainder(quotas, total, order):
    base = np.floor(quotas + _EPS).astype(np.int64)
    left = total - base.sum()
    frac = quotas - base
    # ties broken by the (random) order
    rank = sorted(order, key=lambda g: -frac[g])
    for g in rank[:left]:
        base[g] += 1
    return base


def split_fewshot(dataset, fraction, seed=None):
    """
    Sample a few-shot labeled subset of slices, stratified across cases.  When the
    sample has at least one slice per case, every case contributes one slice and
    the rest are allocated in proportion to each case's remaining slices (largest
    remainder); otherwise the sampled slices come from distinct random cases.

    Args:
        dataset(samora.datasets.SegDataset): the slices to sample from.
        fraction(float): the sampled fraction, in ``(0, 1]``.
        seed: the random seed (see :py:func:`samora.util.rng`).

    Returns:
        FewShotPair: the labeled subset and the remainder, as data sets.

    Raises:
        ValueError: if the fraction is out of range or yields no slices.
    """
    if not 0 < fraction <= 1:
        raise ValueError('few-shot fraction must be in (0, 1], got {}'.format(fraction))
    N = len(dataset)
    n = fewshot_count(N, fraction)
    if n == 0:
        raise ValueError('fraction {} of {} slices selects no slices'.format(fraction, N))

    rng = util.rng(seed)
    case_ids = dataset.slices['case_id'].values
    cases = dataset.cases()
    groups = [np.flatnonzero(case_ids == c) for c in cases]
    G = len(groups)
    order = list(rng.permutation(G))

    if n < G:
        _logger.warning('%d slices cannot cover %d cases; sampling distinct cases', n, G)
        alloc = np.zeros(G, dtype=np.int64)
        alloc[order[:n]] = 1
    else:
        extra_cap = np.array([len(g) - 1 for g in groups], dtype=np.float64)
        spare = N - G
        quotas = extra_cap * (n - G) / spare if spare > 0 else np.zeros(G)
        alloc = 1 + _largest_remainder(quotas, n - G, order)

    picked = []
    for g, k in zip(groups, alloc):
        if k > 0:
            picked.append(np.sort(rng.choice(g, int(k), replace=False)))
    labeled = np.sort(np.concatenate(picked))
    rest = np.setdiff1d(np.arange(N), labeled, assume_unique=True)
    _logger.info('few-shot split: %d of %d slices (%.1f%%) from %d cases',
                 len(labeled), N, 100 * len(labeled) / N, int(np.sum(alloc > 0)))
    return FewShotPair(dataset.subset(labeled), dataset.subset(rest))
