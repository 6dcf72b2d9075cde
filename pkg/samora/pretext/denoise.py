"""
Pixel-level denoising pretext: the student encoder with its pixel expert and a
U-Net-style decoder learn to reconstruct clean slices from noisy ones.
"""

import logging
import warnings

import numpy as np
import torch

from samora import Level, DataWarning
from samora.models.decoder import DenoiseDecoder
from samora.metrics import psnr
from samora.util import derive_seed
from .losses import recon_loss
from .corrupt import add_noise
from .train import run_epochs
from .distill import PretextResult, prepare_student
from .data import corpus_images, to_tensor

_log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


def noisy_pair(raw, sigma, seeds):
    """
    Build model inputs for a batch of clean ``[B, H, W]`` images in ``[0, 1]``.
    Clean and noisy images are both normalized with the clean image's mean and
    standard deviation.

    Returns:
        tuple: ``(clean_z, noisy_z, means, sds)`` with arrays shaped like ``raw``
        and per-image statistics.
    """
    noisy = np.stack([add_noise(im, sigma, s) for (im, s) in zip(raw, seeds)])
    means = raw.mean(axis=(1, 2), keepdims=True)
    sds = np.maximum(raw.std(axis=(1, 2), keepdims=True), SIGMA_FLOOR)
    return ((raw - means) / sds).astype(np.float32), ((noisy - means) / sds).astype(np.float32), \
        means, sds


def denoise_forward(student, decoder, noisy):
    "Reconstruct ``[B, 1, H, W]`` normalized images from noisy inputs."
    ecfg = student.config
    final, hidden = student(noisy, Level.PIXEL, return_hidden=True)
    skip = hidden[max(ecfg.depth // 2 - 1, 0)]
    return decoder(final, skip)


def pretrain_pixel(student, corpus, cfg, *, decoder=None, rank=None):
    """
    Train the pixel-level expert with the denoising objective
    ``recon_loss(x, G(noisy x))``.

    Args:
        student(samora.models.encoder.FrozenEncoder): the student encoder.
        corpus: unlabeled images (data set or ``[N, H, W]`` array in ``[0, 1]``).
        cfg(samora.pretext.train.PretextConfig): the pixel-level settings.
        decoder(DenoiseDecoder): the reconstruction decoder (created if ``None``).
        rank(int): expert rank, used when the expert must be created.

    Returns:
        PretextResult: the trained expert, losses and decoder.
    """
    expert = prepare_student(student, Level.PIXEL, rank)
    ecfg = student.config
    if cfg.noise_sigma == 0:
        warnings.warn('denoising with sigma = 0 reduces to plain autoencoding', DataWarning)
    if decoder is None:
        decoder = DenoiseDecoder(ecfg.dim, ecfg.grid, ecfg.patch_size,
                                 seed=derive_seed('denoise-decoder', base=cfg.seed))
    raw = corpus_images(corpus)
    if len(raw) == 0:
        raise ValueError('cannot pre-train on an empty corpus')

    def step_loss(idx, epoch, step):
        seeds = [derive_seed('noise', epoch, int(i), base=cfg.seed) for i in idx]
        clean, noisy, _, _ = noisy_pair(raw[idx], cfg.noise_sigma, seeds)
        pred = denoise_forward(student, decoder, to_tensor(noisy))
        return recon_loss(to_tensor(clean), pred)

    params = list(expert.parameters()) + list(decoder.parameters())
    _log.info('denoising pre-training of %s on %d images (sigma %.3f)',
              expert, len(raw), cfg.noise_sigma)
    losses = run_epochs(params, len(raw), cfg, step_loss, epochs=cfg.epochs,
                        label='pixel denoising')
    expert.requires_grad_(False)
    return PretextResult(expert, losses, decoder)


def denoise_psnr(student, decoder, images, sigma, seed):
    """
    Mean PSNR (data range 1) of denoised images against their clean versions.

    Args:
        images(numpy.ndarray): clean ``[N, H, W]`` images in ``[0, 1]``.

    Returns:
        tuple: ``(denoised_psnr, noisy_psnr)``.
    """
    raw = corpus_images(images)
    seeds = [derive_seed('eval-noise', i, base=seed) for i in range(len(raw))]
    clean, noisy, means, sds = noisy_pair(raw, sigma, seeds)
    with torch.no_grad():
        pred = denoise_forward(student, decoder, to_tensor(noisy)).squeeze(1).numpy()
    denoised = pred * sds + means
    noisy_raw = noisy * sds + means
    d = np.mean([psnr(denoised[i], raw[i]) for i in range(len(raw))])
    n = np.mean([psnr(noisy_raw[i], raw[i]) for i in range(len(raw))])
    return float(d), float(n)
