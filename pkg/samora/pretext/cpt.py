"""
Continual pre-training (CPT) of the toy teachers on the unlabeled corpus.
"""

import logging

import torch

from samora import Level
from samora.augment import AugmentConfig
from samora.errors import ConfigError
from samora.models.teachers import ConvTeacher, ViTTeacher, patchify, freeze
from samora.util import derive_seed
from .losses import nt_xent_loss, recon_loss
from .corrupt import mask_matrix
from .train import run_epochs
from .data import corpus_images, normalized, to_tensor, views

_log = logging.getLogger(__name__)


def cpt_teacher(teacher, corpus, cfg, augment_cfg=None):
    """
    Continually pre-train a teacher on an unlabeled corpus with its pretext
    objective, then freeze it.  The image-level (convolutional) teacher trains
    with NT-Xent over two augmented views; the patch-level (ViT) teacher with
    masked-patch pixel reconstruction.

    Args:
        teacher(ConvTeacher or ViTTeacher): the teacher.
        corpus: unlabeled images (data set or ``[N, H, W]`` array in ``[0, 1]``).
        cfg(samora.pretext.train.PretextConfig): the level settings.
        augment_cfg(samora.augment.AugmentConfig): view augmentation.

    Returns:
        the frozen teacher, with its per-step losses in ``cpt_losses_``.

    Raises:
        ValueError: if the corpus is empty.
    """
    raw = corpus_images(corpus)
    if len(raw) == 0:
        raise ValueError('cannot pre-train a teacher on an empty corpus')
    images = normalized(raw)
    level = Level.parse(cfg.level)
    aug = augment_cfg or AugmentConfig()
    for p in teacher.parameters():
        p.requires_grad_(True)
    teacher.train()

    if isinstance(teacher, ConvTeacher):
        if level != Level.IMAGE:
            _log.warning('contrastive CPT of a convolutional teacher configured as %s', level)

        def step_loss(idx, epoch, step):
            a = to_tensor(views(images[idx], aug, cfg.seed, 'view-a', epoch, idx))
            b = to_tensor(views(images[idx], aug, cfg.seed, 'view-b', epoch, idx))
            return nt_xent_loss(teacher.embed(a), teacher.embed(b), cfg.temperature)
        min_batch = 2
    elif isinstance(teacher, ViTTeacher):
        L = teacher.grid ** 2

        def step_loss(idx, epoch, step):
            x = to_tensor(images[idx])
            seeds = [derive_seed('cpt-mask', epoch, int(i), base=cfg.seed) for i in idx]
            mask = mask_matrix(L, cfg.mask_ratio, seeds)
            pred = teacher.reconstruct(x, mask)
            target = patchify(x, teacher.patch_size)
            if mask.any():
                return recon_loss(target[mask], pred[mask])
            return recon_loss(target, pred)
        min_batch = 1
    else:
        raise ConfigError('unsupported teacher type {}'.format(type(teacher).__name__))

    opt = torch.optim.AdamW(teacher.parameters(), lr=cfg.cpt_lr, weight_decay=0.05)
    _log.info('continual pre-training %s teacher on %d images for %d epochs',
              level.value, len(images), cfg.cpt_epochs)
    losses = run_epochs(list(teacher.parameters()), len(images), cfg, step_loss,
                        epochs=cfg.cpt_epochs, label='{} teacher CPT'.format(level.value),
                        base_lr=cfg.cpt_lr, optimizer=opt, min_batch=min_batch)
    teacher.cpt_losses_ = losses
    return freeze(teacher)
