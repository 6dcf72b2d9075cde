"""
Helpers turning corpora into model inputs.
"""

import numpy as np
import torch

from samora.augment import zscore, augment_batch


def corpus_images(corpus):
    """
    Get the raw ``[N, H, W]`` image array of a corpus (a
    :class:`~samora.datasets.SegDataset` or an array).
    """
    images = getattr(corpus, 'images', corpus)
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 3:
        raise ValueError('corpus must be [N, H, W] images')
    return images


def normalized(images):
    "Z-score each image of a ``[B, H, W]`` array."
    return np.stack([zscore(im) for im in images]).astype(np.float32)


def to_tensor(images, dtype=torch.float32):
    "Convert ``[B, H, W]`` arrays to ``[B, 1, H, W]`` tensors."
    return torch.from_numpy(np.ascontiguousarray(images)).to(dtype).unsqueeze(1)


def views(images, aug_cfg, seed, tag, epoch, idx):
    "Augmented views of normalized images, keyed by ``(tag, epoch, index)``."
    keys = [(tag, epoch, int(i)) for i in idx]
    out, _ = augment_batch(images, None, aug_cfg, seed, keys)
    return out


def token_mask_to_pixels(mask, grid, patch_size):
    "Expand a ``[B, L]`` token mask to a ``[B, 1, H, W]`` pixel mask."
    b = mask.shape[0]
    m = mask.reshape(b, grid, grid).to(torch.float32)
    m = m.repeat_interleave(patch_size, 1).repeat_interleave(patch_size, 2)
    return m.unsqueeze(1)
