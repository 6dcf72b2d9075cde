"""
Stage-2 supervised fine-tuning of the fusion modules and the segmentation decoder.
"""

import logging
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from samora import Level
from samora.augment import AugmentConfig, augment_batch
from samora.errors import ConfigError, FrozenModelError
from samora.fusion import ComposeFusion, search_coefficients
from samora.metrics import class_dice
from samora.util import Stopwatch, rng as make_rng, derive_seed, tensor_digest
from samora.pretext.data import normalized, to_tensor

_log = logging.getLogger(__name__)

DICE_EPS = 1e-5
STAGES = ('stage1-image', 'stage1-patch', 'stage1-pixel', 'stage2')


@dataclass
class FinetuneConfig:
    """
    Stage-2 settings.

    Attributes:
        loss_ce(float): cross-entropy weight :math:`\\lambda_{ce}`.
        loss_dice(float): Dice-loss weight :math:`\\lambda_{dice}`.
        base_lr(float): the initial learning rate :math:`I_{lr}`.
        warmup(int): the warmup period :math:`WP`.
        warmup_unit(str): ``'steps'`` or ``'epochs'`` (converted to steps).
        max_iter(int):
            the decay length :math:`MI`; ``None`` decays to zero at the last
            step of the run.
        batch_size(int): minibatch size.
        epochs(int): training epochs.
        weight_decay(float): AdamW weight decay.
        betas(list): AdamW betas.
        fewshot(float): labeled fraction of the training slices.
        augment(bool): augment training slices.
        allow_scratch_adapters(bool): permit experts without stage-1 weights.
        seed(int): seed for batching and augmentation.
    """
    loss_ce: float = 0.2
    loss_dice: float = 0.8
    base_lr: float = 0.005
    warmup: int = 250
    warmup_unit: str = 'steps'
    max_iter: int = None
    batch_size: int = 8
    epochs: int = 20
    weight_decay: float = 0.1
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    fewshot: float = 0.1
    augment: bool = True
    allow_scratch_adapters: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.warmup < 0:
            raise ConfigError('finetune.warmup must be non-negative')
        if self.warmup_unit not in ('steps', 'epochs'):
            raise ConfigError('finetune.warmup_unit must be steps or epochs')
        if self.max_iter is not None and self.max_iter <= 0:
            raise ConfigError('finetune.max_iter must be positive')
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError('invalid finetune batch size or epoch count')
        if self.loss_ce < 0 or self.loss_dice < 0:
            raise ConfigError('loss weights must be non-negative')

    def warmup_steps(self, steps_per_epoch):
        "The warmup period in steps."
        if self.warmup_unit == 'epochs':
            return int(self.warmup * steps_per_epoch)
        return int(self.warmup)

    def decay_steps(self, total_steps, steps_per_epoch):
        "The decay length :math:`MI` in steps."
        if self.max_iter is not None:
            return self.max_iter
        return max(total_steps - self.warmup_steps(steps_per_epoch), 1)


def lr_at(cfg, step, max_iter=None, warmup=None):
    """
    The stage-2 learning rate at step ``T``: linear warmup to ``base_lr`` over
    ``WP`` steps, then linear decay reaching zero ``MI`` steps later.

    Args:
        cfg(FinetuneConfig): the settings.
        step(int): the step :math:`T \\ge 0`.
        max_iter(int): overrides ``cfg.max_iter``.
        warmup(int): overrides the warmup length in steps.

    >>> cfg = FinetuneConfig(max_iter=18600)
    >>> lr_at(cfg, 0), lr_at(cfg, 125), lr_at(cfg, 250), lr_at(cfg, 250 + 18600)
    (0.0, 0.0025, 0.005, 0.0)
    """
    if step < 0:
        raise ValueError('step must be non-negative')
    wp = cfg.warmup if warmup is None else warmup
    mi = cfg.max_iter if max_iter is None else max_iter
    if mi is None:
        raise ConfigError('max_iter is unresolved')
    if wp > 0 and step <= wp:
        return step * cfg.base_lr / wp
    return max(cfg.base_lr * (1 - (step - wp) / mi), 0.0)


def _batched(logits, target):
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
    if target.dim() == 2:
        target = target.unsqueeze(0)
    return logits, target.long()


def dice_loss(logits, target):
    """
    Soft multi-class Dice loss over the foreground classes, pooled over the batch.
    """
    logits, target = _batched(logits, target)
    probs = torch.softmax(logits, dim=1)
    scores = []
    for c in range(1, logits.shape[1]):
        p = probs[:, c]
        q = (target == c).to(p.dtype)
        scores.append((2 * (p * q).sum() + DICE_EPS) / (p.sum() + q.sum() + DICE_EPS))
    if not scores:
        return logits.new_zeros(())
    return 1 - torch.stack(scores).mean()


def combined_loss(logits, target, cfg=None, return_terms=False):
    """
    The stage-2 loss :math:`\\lambda_{ce} L_{ce} + \\lambda_{dice} L_{dice}`.

    Args:
        logits(torch.Tensor): ``[B, C+1, H, W]`` (or unbatched) logits.
        target(torch.Tensor): integer labels ``[B, H, W]`` in ``0..C``.
        cfg(FinetuneConfig): the loss weights.
        return_terms(bool): also return the two terms.

    Returns:
        torch.Tensor or tuple: the loss, or ``(loss, ce, dice)``.

    Raises:
        ValueError: if a label is outside ``0..C``.
    """
    cfg = cfg or FinetuneConfig()
    logits, target = _batched(logits, target)
    if logits.shape[-2:] != target.shape[-2:] or logits.shape[0] != target.shape[0]:
        raise ValueError('logits {} do not match target {}'.format(
            tuple(logits.shape), tuple(target.shape)))
    if target.numel() and (target.min() < 0 or target.max() >= logits.shape[1]):
        raise ValueError('labels must be in 0..{}'.format(logits.shape[1] - 1))
    ce = F.cross_entropy(logits, target)
    dl = dice_loss(logits, target)
    total = cfg.loss_ce * ce + cfg.loss_dice * dl
    if return_terms:
        return total, ce, dl
    return total


def trainable_parameters(model, stage, aux=None):
    """
    The named parameters a training stage may update.

    Args:
        model:
            a :class:`~samora.models.assembly.SAMoraModel` (stage 2) or a student
            encoder / model holding the level's expert (stage 1).
        stage(str): one of ``stage1-image``, ``stage1-patch``, ``stage1-pixel``,
            ``stage2``.
        aux(torch.nn.Module):
            the stage-1 auxiliary module (projector or denoising decoder).

    Returns:
        list: ``(name, parameter)`` pairs.
    """
    if stage not in STAGES:
        raise ConfigError('unknown training stage {!r}'.format(stage))
    if stage == 'stage2':
        return list(model.trainable_named_parameters())

    level = Level.parse(stage.split('-')[1])
    encoder = getattr(model, 'encoder', model)
    if level.value not in encoder.experts:
        raise ConfigError('model has no {} expert'.format(level.value))
    named = [('encoder.experts.{}.{}'.format(level.value, n), p)
             for (n, p) in encoder.experts[level.value].named_parameters()]
    if aux is not None:
        named += [('aux.' + n, p) for (n, p) in aux.named_parameters()]
    return named


TrainState = namedtuple('TrainState', ['step', 'lr', 'report', 'frozen_digest'])
TrainState.__doc__ = 'The final state of a fine-tuning run (named tuple).'
TrainState.step.__doc__ = 'The number of optimizer updates performed.'
TrainState.lr.__doc__ = 'The learning rate of the last update.'
TrainState.report.__doc__ = \
    'Per-step data frame with columns ``step``, ``lr``, ``loss_ce``, ``loss_dice``, ``loss_total``.'
TrainState.frozen_digest.__doc__ = 'Digest of the frozen parameters, taken before training.'


def load_adapters(model, adapters, allow_scratch=False):
    """
    Copy stage-1 expert weights into a model's expert slots.

    Args:
        model(SAMoraModel): the model.
        adapters(dict): maps levels to expert modules or state dictionaries.
        allow_scratch(bool): leave missing experts at their fresh initialization.

    Raises:
        ConfigError: if a retained level has no adapter weights and scratch
        adapters are not allowed, or if the weights do not fit the slot.
    """
    adapters = {Level.parse(k): v for (k, v) in (adapters or {}).items()}
    for lvl in model.levels:
        src = adapters.get(lvl)
        if src is None:
            if not allow_scratch:
                raise ConfigError('no stage-1 weights for the {} expert'.format(lvl.value))
            _log.warning('%s expert starts from scratch', lvl.value)
            continue
        state = src.state_dict() if hasattr(src, 'state_dict') else src
        try:
            model.expert(lvl).load_state_dict(state)
        except RuntimeError as e:
            raise ConfigError('{} adapter weights do not fit: {}'.format(lvl.value, e))
        model.expert(lvl).requires_grad_(False)


def predict_labels(model, images, batch_size=16):
    """
    Predict label rasters for normalized images.

    Args:
        images(numpy.ndarray): ``[N, H, W]`` normalized images.

    Returns:
        numpy.ndarray: ``[N, H, W]`` integer labels.
    """
    out = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(to_tensor(images[i:i + batch_size]))
            out.append(logits.argmax(1).numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0,) + tuple(images.shape[1:]), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


class Finetuner:
    """
    Stage-2 trainer: the encoder and the experts stay frozen while the fusion
    modules and the decoder are trained with :func:`combined_loss` under the
    :func:`lr_at` schedule.  Updates are numbered from 1; the update that advances
    the step counter to ``T`` uses ``lr_at(T)``.

    For the weight-composition strategy, the decoder is trained on the frozen
    encoder output and the composition coefficients are then searched to maximize
    mean Dice on the training slices.

    Args:
        cfg(FinetuneConfig): the settings.
        augment_cfg(AugmentConfig): augmentation ranges.
    """

    def __init__(self, cfg=None, augment_cfg=None):
        self.cfg = cfg or FinetuneConfig()
        self.augment_cfg = augment_cfg or AugmentConfig(seed=self.cfg.seed)

    def fit(self, model, dataset, adapters=None):
        """
        Fine-tune a model.

        Args:
            model(SAMoraModel): the assembled model.
            dataset(samora.datasets.SegDataset): labeled training slices.
            adapters(dict):
                stage-1 expert weights by level; ``None`` means the model's experts
                are already loaded.

        Returns:
            Finetuner: the trainer, with the final state in ``state_``.
        """
        cfg = self.cfg
        if not dataset.labeled or len(dataset) == 0:
            raise ValueError('fine-tuning needs a non-empty labeled data set')
        if adapters is not None:
            load_adapters(model, adapters, cfg.allow_scratch_adapters)
            model.adapters_loaded_ = True
        elif not cfg.allow_scratch_adapters and not getattr(model, 'adapters_loaded_', False):
            raise ConfigError('no stage-1 adapter weights were supplied')

        model.encoder.freeze()
        frozen = model.frozen_named_parameters()
        digest = tensor_digest(frozen)
        named = trainable_parameters(model, 'stage2')
        params = [p for (_, p) in named]
        for p in params:
            p.requires_grad_(True)
        model.train()
        model.encoder.eval()

        images = normalized(dataset.images)
        masks = dataset.masks
        n = len(images)
        per_epoch = int(np.ceil(n / cfg.batch_size))
        total = per_epoch * cfg.epochs
        wp = cfg.warmup_steps(per_epoch)
        mi = cfg.decay_steps(total, per_epoch)

        opt = None
        if params:
            opt = torch.optim.AdamW(params, lr=0.0, betas=tuple(cfg.betas),
                                    weight_decay=cfg.weight_decay)
        _log.info('fine-tuning %d parameters (%s fusion) on %d slices for %d epochs',
                  sum(p.numel() for p in params), model.strategy, n, cfg.epochs)

        timer = Stopwatch()
        rows = []
        step = 0
        lr = 0.0
        for epoch in range(cfg.epochs):
            order = make_rng(derive_seed('finetune-batches', epoch, base=cfg.seed)).permutation(n)
            e_losses = []
            for b in range(0, n, cfg.batch_size):
                idx = order[b:b + cfg.batch_size]
                x, y = images[idx], masks[idx]
                if cfg.augment:
                    keys = [('finetune', epoch, int(i)) for i in idx]
                    x, y = augment_batch(x, y, self.augment_cfg, cfg.seed, keys)
                logits = model(to_tensor(x))
                target = torch.from_numpy(np.asarray(y, dtype=np.int64))
                loss, ce, dl = combined_loss(logits, target, cfg, True)
                step += 1
                lr = lr_at(cfg, step, mi, wp)
                if opt is not None:
                    for g in opt.param_groups:
                        g['lr'] = lr
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                rows.append((step, lr, float(ce), float(dl), float(loss)))
                e_losses.append(float(loss))
            _log.info('[%s] finished epoch %d: loss %.4f, lr %.6f, %.1f slices/s', timer, epoch,
                      np.mean(e_losses), lr, n / max(timer.lap(), 1e-9))

        if isinstance(model.fusion, ComposeFusion):
            self._search_compose(model, images, masks)

        model.eval()
        report = pd.DataFrame.from_records(
            rows, columns=['step', 'lr', 'loss_ce', 'loss_dice', 'loss_total'])
        if tensor_digest(model.frozen_named_parameters()) != digest:
            raise FrozenModelError('frozen parameters changed during fine-tuning')
        self.state_ = TrainState(step, lr, report, digest)
        return self

    def _search_compose(self, model, images, masks):
        fc = model.fusion_config
        experts = model.experts()
        if len(experts) != 3:
            return

        def objective(c):
            model.fusion.set_coefficients(c)
            pred = predict_labels(model, images)
            scores = [class_dice(pred[i], masks[i], model.num_classes) for i in range(len(pred))]
            return float(np.mean(scores))

        c, best, _ = search_coefficients(objective, 3, bounds=tuple(fc.compose_bounds),
                                         rounds=fc.compose_rounds)
        model.fusion.set_coefficients(c)
        _log.info('composition coefficients %s (training Dice %.4f)', np.round(c, 4), best)


def finetune(model, dataset, cfg=None, adapters=None, augment_cfg=None):
    """
    Fine-tune a model with a :class:`Finetuner`.

    Returns:
        TrainState: the final training state and report.
    """
    return Finetuner(cfg, augment_cfg).fit(model, dataset, adapters).state_


def write_train_report(report, path):
    """
    Write a training report as ``key=value`` lines, one line per step.
    """
    with open(path, 'w') as f:
        for row in report.itertuples(index=False):
            f.write('step={} lr={:.8g} loss_ce={:.8g} loss_dice={:.8g} loss_total={:.8g}\n'.format(
                row.step, row.lr, row.loss_ce, row.loss_dice, row.loss_total))
