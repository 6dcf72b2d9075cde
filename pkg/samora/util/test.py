"""
Test utilities for SAMora tests.
"""

import os
import logging
from contextlib import contextmanager

import numpy as np

import hypothesis.strategies as st
import hypothesis.extra.numpy as nph

from samora.config import ExperimentConfig, with_overrides
from samora.models.encoder import EncoderConfig

_log = logging.getLogger(__name__)

TINY_ENCODER = dict(depth=2, dim=16, heads=2, patch_size=8, image_size=32, mlp_ratio=2.0)

TINY_OVERRIDES = {
    'encoder.depth': 2, 'encoder.dim': 16, 'encoder.heads': 2, 'encoder.patch_size': 8,
    'encoder.image_size': 32, 'encoder.mlp_ratio': 2.0,
    'data.synthetic.image_size': 32, 'data.synthetic.num_cases': 5,
    'data.synthetic.test_cases': 2, 'data.synthetic.slices_per_case': 4,
    'data.synthetic.num_classes': 2, 'data.synthetic.unlabeled_count': 16,
    'teacher.image.width': 8, 'teacher.image.depth': 2, 'teacher.image.proj_dim': 8,
    'teacher.patch.width': 8, 'teacher.patch.depth': 1, 'teacher.patch.heads': 2,
    'teacher.patch.proj_dim': 8,
    'pretext.image.epochs': 1, 'pretext.image.cpt_epochs': 1, 'pretext.image.batch_size': 8,
    'pretext.patch.epochs': 1, 'pretext.patch.cpt_epochs': 1, 'pretext.patch.batch_size': 8,
    'pretext.pixel.epochs': 1, 'pretext.pixel.batch_size': 8,
    'finetune.epochs': 1, 'finetune.batch_size': 4, 'finetune.warmup': 2,
    'finetune.fewshot': 0.5,
    'seeds': [0, 1],
}


def tiny_encoder(**kwargs):
    "A small encoder configuration for fast tests."
    return EncoderConfig(**dict(TINY_ENCODER, **kwargs))


def tiny_config(**overrides):
    """
    A complete experiment configuration small enough to run the whole pipeline in
    seconds.  Keyword arguments are dotted-key overrides with ``__`` for ``.``.
    """
    extra = {k.replace('__', '.'): v for (k, v) in overrides.items()}
    return with_overrides(ExperimentConfig(), dict(TINY_OVERRIDES, **extra))


@st.composite
def masks(draw, shape=None, max_side=12, ndim=2):
    "Draw a boolean mask."
    if shape is None:
        shape = tuple(draw(st.integers(1, max_side)) for _ in range(ndim))
    return draw(nph.arrays(np.bool_, shape))


@st.composite
def mask_pairs(draw, max_side=10, ndim=2):
    "Draw two boolean masks of the same shape."
    shape = tuple(draw(st.integers(1, max_side)) for _ in range(ndim))
    return draw(masks(shape)), draw(masks(shape))


@contextmanager
def set_env_var(var, val):
    "Set an environment variable & restore it."
    is_set = var in os.environ
    if is_set:
        old_val = os.environ[var]
    try:
        if val is None:
            if is_set:
                del os.environ[var]
        else:
            os.environ[var] = val
        yield
    finally:
        if is_set:
            os.environ[var] = old_val
        elif val is not None:
            del os.environ[var]


def central_fd_check(loss_fn, param, n=6, eps=1e-6, rtol=1e-3):
    """
    Compare autograd gradients of a float64 loss with central finite differences
    at ``n`` entries of ``param``.
    """
    import torch

    param.grad = None
    loss_fn().backward()
    grad = param.grad.detach().clone().view(-1)
    flat = param.data.view(-1)
    idx = np.random.default_rng(5).choice(flat.numel(), min(n, flat.numel()), replace=False)
    for i in idx:
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
        fd = (up - down) / (2 * eps)
        an = grad[i].item()
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an), 1e-6), \
            'gradient mismatch at {}: analytic {}, numeric {}'.format(i, an, fd)
