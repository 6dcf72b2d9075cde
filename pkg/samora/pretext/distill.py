"""
Teacher-to-student distillation into the image- and patch-level LoRA experts.

The student is the frozen encoder with the level's expert merged in.  Only that
expert and the projector (teacher space to student space) are trained:

* image level: the projected global teacher feature is matched to the student's
  mean-pooled final tokens;
* patch level: the student sees the image with a random subset of patches
  blanked out and matches the projected per-token teacher features (computed on
  the full image) at the masked positions.
"""

import logging
from collections import namedtuple

import torch

from samora import Level
from samora.errors import ConfigError, FrozenModelError
from samora.models.decoder import Projector
from samora.models.lora import inject_lora
from samora.models.teachers import require_frozen
from samora.util import derive_seed
from .losses import recon_loss
from .corrupt import mask_matrix
from .train import run_epochs
from .data import corpus_images, normalized, to_tensor, token_mask_to_pixels

_log = logging.getLogger(__name__)

PretextResult = namedtuple('PretextResult', ['expert', 'losses', 'aux'])
PretextResult.__doc__ = 'Result of a stage-1 pretext run (named tuple).'
PretextResult.expert.__doc__ = 'The trained LoRA expert.'
PretextResult.losses.__doc__ = 'Per-step training losses.'
PretextResult.aux.__doc__ = 'The auxiliary trained module (projector or denoising decoder).'


def prepare_student(student, level, rank=None):
    """
    Get (or inject) a level's expert and make it the only trainable part of the
    student.

    Raises:
        FrozenModelError: if the student's base encoder has trainable parameters.
    """
    if any(p.requires_grad for (_, p) in student.frozen_parameters()):
        raise FrozenModelError('student encoder must be frozen')
    level = Level.parse(level)
    if level.value in student.experts:
        expert = student.experts[level.value]
        if rank is not None and expert.rank != rank:
            raise ConfigError('existing {} expert has rank {}, not {}'.format(
                level.value, expert.rank, rank))
    else:
        expert = inject_lora(student, level, rank or 4)
    for name, other in student.experts.items():
        other.requires_grad_(name == level.value)
    return expert


def distill_level(level, teacher, student, corpus, cfg, *, projector=None, rank=None):
    """
    Distill a frozen teacher into a student expert.

    Args:
        level(samora.Level): ``IMAGE`` or ``PATCH``.
        teacher: a frozen teacher exposing ``features(images)`` and ``feature_dim``.
        student(samora.models.encoder.FrozenEncoder): the student encoder.
        corpus: unlabeled images (data set or ``[N, H, W]`` array).
        cfg(samora.pretext.train.PretextConfig): the level settings.
        projector(Projector): the alignment module (created if ``None``).
        rank(int): expert rank, used when the expert must be created.

    Returns:
        PretextResult: the trained expert, losses and projector.

    Raises:
        FrozenModelError: if the teacher or student encoder is not frozen.
    """
    level = Level.parse(level)
    if level not in (Level.IMAGE, Level.PATCH):
        raise ConfigError('distillation is defined for image and patch levels, not {}'.format(
            level.value))
    require_frozen(teacher)
    expert = prepare_student(student, level, rank)
    ecfg = student.config
    if projector is None:
        projector = Projector(teacher.feature_dim, ecfg.dim, seed=derive_seed('projector', level,
                                                                             base=cfg.seed))
    raw = corpus_images(corpus)
    if len(raw) == 0:
        raise ValueError('cannot distill on an empty corpus')
    images = normalized(raw)
    L = ecfg.seq_len

    def step_loss(idx, epoch, step):
        x = to_tensor(images[idx])
        if level == Level.IMAGE:
            with torch.no_grad():
                t = teacher.features(x)
            s = student(x, level).mean(dim=1)
            return recon_loss(projector(t), s)
        else:
            seeds = [derive_seed('distill-mask', epoch, int(i), base=cfg.seed) for i in idx]
            mask = mask_matrix(L, cfg.mask_ratio, seeds)
            xm = x * (1 - token_mask_to_pixels(mask, ecfg.grid, ecfg.patch_size))
            with torch.no_grad():
                t = teacher.features(x)
            s = student(xm, level)
            pt = projector(t)
            if mask.any():
                return recon_loss(pt[mask], s[mask])
            return recon_loss(pt, s)

    params = list(expert.parameters()) + list(projector.parameters())
    _log.info('distilling %s teacher into %s on %d images', level.value, expert, len(images))
    losses = run_epochs(params, len(images), cfg, step_loss, epochs=cfg.epochs,
                        label='{} distillation'.format(level.value))
    expert.requires_grad_(False)
    return PretextResult(expert, losses, projector)
