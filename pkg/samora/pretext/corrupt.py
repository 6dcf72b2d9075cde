"""
Input corruptions for the pretext tasks: token masking and additive noise.
"""

import logging

import numpy as np
import torch

from samora.util import rng as make_rng

_log = logging.getLogger(__name__)


def mae_mask(tokens, ratio, seed=None):
    """
    Choose tokens to mask uniformly at random.

    Args:
        tokens(int or torch.Tensor):
            the sequence length *L*, or a token tensor whose second-to-last axis
            is *L*.
        ratio(float): masked fraction, in ``[0, 1)``.
        seed: the random seed (see :py:func:`samora.util.rng`).

    Returns:
        tuple: sorted ``(visible_idx, masked_idx)`` index arrays; ``⌊ratio·L⌋`` are
        masked.

    >>> vis, msk = mae_mask(16, 0.75, 42)
    >>> len(vis), len(msk)
    (4, 12)
    """
    if not 0 <= ratio < 1:
        raise ValueError('mask ratio must be in [0, 1), got {}'.format(ratio))
    L = tokens if isinstance(tokens, (int, np.integer)) else tokens.shape[-2]
    n_mask = int(np.floor(ratio * L + 1e-9))
    perm = make_rng(seed).permutation(L)
    return np.sort(perm[n_mask:]), np.sort(perm[:n_mask])


def mask_matrix(length, ratio, seeds):
    "A boolean ``[B, L]`` tensor marking masked tokens, one seed per row."
    rows = []
    for s in seeds:
        m = np.zeros(length, dtype=bool)
        m[mae_mask(length, ratio, s)[1]] = True
        rows.append(m)
    return torch.from_numpy(np.stack(rows))


def add_noise(image, sigma, seed=None, *, clip=(0.0, 1.0)):
    """
    Add Gaussian noise with standard deviation ``sigma``.

    Args:
        image(numpy.ndarray): the image.
        sigma(float): the noise level (non-negative).
        seed: the random seed.
        clip(tuple or None): the valid intensity range.

    Returns:
        numpy.ndarray: the noisy image (a copy).
    """
    if sigma < 0:
        raise ValueError('noise level must be non-negative')
    image = np.asarray(image, dtype=np.float64)
    if sigma > 0:
        noisy = image + make_rng(seed).normal(0.0, sigma, size=image.shape)
    else:
        noisy = image.copy()
    if clip is not None:
        noisy = np.clip(noisy, *clip)
    return noisy
