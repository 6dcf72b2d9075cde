"""
Stage-1 training settings and the shared optimization loop.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR

from samora import Level
from samora.errors import ConfigError
from samora.util import Stopwatch, rng as make_rng, derive_seed
from samora.util.timing import format_duration

_log = logging.getLogger(__name__)

_LEVEL_DEFAULTS = {
    Level.IMAGE: dict(optimizer='sgd', base_lr=0.075, weight_decay=1e-4, betas=[0.9, 0.999],
                      warmup_epochs=0.4, epochs=8),
    Level.PATCH: dict(optimizer='adamw', base_lr=1.5e-4, weight_decay=0.05, betas=[0.9, 0.95],
                      warmup_epochs=0.0, epochs=6),
    Level.PIXEL: dict(optimizer='adamw', base_lr=1e-4, weight_decay=0.05, betas=[0.9, 0.99],
                      warmup_epochs=0.0, epochs=3),
}


@dataclass
class PretextConfig:
    """
    Settings for one stage-1 pretext level and its teacher's continual
    pre-training.  Use :meth:`for_level` for level defaults.

    Attributes:
        level(str): the pretext level.
        optimizer(str): ``'sgd'`` (momentum) or ``'adamw'``.
        base_lr(float): peak learning rate.
        batch_size(int): minibatch size.
        weight_decay(float): weight decay.
        betas(list): AdamW betas.
        momentum(float): SGD momentum.
        warmup_epochs(float): linear warmup length, in epochs, before cosine decay.
        epochs(int): distillation / denoising epochs.
        temperature(float): NT-Xent temperature (image level).
        mask_ratio(float): masked-token fraction (patch level).
        noise_sigma(float): denoising noise level (pixel level).
        cpt_epochs(int): teacher continual pre-training epochs.
        cpt_lr(float): teacher continual pre-training learning rate.
        seed(int): seed for batching, masks, noise and views.
    """
    level: str = 'image'
    optimizer: str = 'sgd'
    base_lr: float = 0.075
    batch_size: int = 16
    weight_decay: float = 1e-4
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    momentum: float = 0.9
    warmup_epochs: float = 0.4
    epochs: int = 8
    temperature: float = 0.1
    mask_ratio: float = 0.75
    noise_sigma: float = 0.1
    cpt_epochs: int = 4
    cpt_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.level = Level.parse(self.level).value
        if self.optimizer not in ('sgd', 'adamw'):
            raise ConfigError('pretext optimizer must be sgd or adamw')
        if self.batch_size < 1 or self.epochs < 0 or self.cpt_epochs < 0:
            raise ConfigError('invalid pretext batch size or epoch count')
        if self.temperature <= 0:
            raise ConfigError('pretext temperature must be positive')
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError('pretext mask_ratio must be in [0, 1)')
        if self.noise_sigma < 0:
            raise ConfigError('pretext noise_sigma must be non-negative')

    @classmethod
    def for_level(cls, level, **kwargs):
        "Default settings for a level, with overrides."
        level = Level.parse(level)
        opts = dict(_LEVEL_DEFAULTS[level])
        opts.update(kwargs)
        return cls(level=level.value, **opts)


def pretext_schedule_lr(cfg, step, steps_per_epoch, total_steps, base_lr=None):
    """
    Stage-1 learning rate: linear warmup over ``cfg.warmup_epochs`` epochs, then
    cosine decay to zero at ``total_steps``.

    >>> cfg = PretextConfig.for_level('patch')
    >>> pretext_schedule_lr(cfg, 0, 10, 100) == cfg.base_lr
    True
    """
    lr = cfg.base_lr if base_lr is None else base_lr
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return lr * min((step + 1) / warm, 1.0)
    if total_steps <= warm:
        return lr
    progress = min((step - warm) / (total_steps - warm), 1.0)
    return lr * 0.5 * (1 + math.cos(math.pi * progress))


def make_optimizer(params, cfg, lr=None):
    "Create the optimizer a pretext configuration calls for."
    lr = cfg.base_lr if lr is None else lr
    if cfg.optimizer == 'sgd':
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    else:
        return torch.optim.AdamW(params, lr=lr, betas=tuple(cfg.betas),
                                 weight_decay=cfg.weight_decay)


def batch_indices(n, batch_size, seed, epoch, min_batch=1):
    """
    Shuffled minibatch indices for one epoch, derived from ``(seed, epoch)``.
    Batches smaller than ``min_batch`` are dropped.
    """
    order = make_rng(derive_seed('batches', epoch, base=seed)).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= min_batch]


def run_epochs(params, n_items, cfg, step_loss, *, epochs, label, base_lr=None,
               optimizer=None, min_batch=1, on_step=None):
    """
    Run a stage-1 optimization loop.

    Args:
        params(list): the parameters to train.
        n_items(int): the number of training items.
        cfg(PretextConfig): the settings (batch size, schedule, seed).
        step_loss(callable):
            ``step_loss(indices, epoch, step)`` computing the minibatch loss.
        epochs(int): the number of epochs.
        label(str): name for log messages.
        base_lr(float): overrides ``cfg.base_lr``.
        optimizer: an optimizer to use instead of :func:`make_optimizer`.
        min_batch(int): the smallest batch to train on.
        on_step(callable): called as ``on_step(step)`` after every update.

    Returns:
        list: the per-step losses.
    """
    losses = []
    if epochs <= 0 or n_items == 0:
        return losses
    plan = [batch_indices(n_items, cfg.batch_size, cfg.seed, e, min_batch)
            for e in range(epochs)]
    per_epoch = max(len(plan[0]), 1)
    total = sum(len(p) for p in plan)
    opt = optimizer or make_optimizer(params, cfg, base_lr)
    lr0 = opt.param_groups[0]['lr']
    sched = LambdaLR(opt, lambda s: pretext_schedule_lr(cfg, s, per_epoch, total, lr0) / lr0
                     if lr0 > 0 else 0.0)

    timer = Stopwatch()
    step = 0
    for epoch, batches in enumerate(plan):
        e_losses = []
        for idx in batches:
            loss = step_loss(idx, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            v = float(loss.detach())
            losses.append(v)
            e_losses.append(v)
            if on_step is not None:
                on_step(step)
        _log.info('[%s] %s epoch %d: mean loss %.5f (%s)', timer, label, epoch,
                  np.mean(e_losses) if e_losses else float('nan'), format_duration(timer.lap()))
    return losses


def smooth_losses(losses, window=10):
    """
    Moving average of a loss curve over non-overlapping windows.

    >>> smooth_losses([4, 2, 3, 1], 2).tolist()
    [3.0, 2.0]
    """
    losses = np.asarray(losses, dtype=np.float64)
    n = len(losses) // window
    if n == 0:
        return np.array([losses.mean()]) if len(losses) else losses
    return losses[:n * window].reshape(n, window).mean(axis=1)
