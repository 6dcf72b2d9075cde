"""
Low-rank adapters (LoRA) for the frozen encoder.

A :class:`LoraExpertSet` holds one ``(A, B)`` pair per adapted projection per
encoder block.  Two forward readings are supported:

``delta``
    The expert path of the stage-2 model.  Adapted projections use only the
    low-rank delta :math:`BA`; the key and output projections reuse the frozen
    weights without biases.  With every ``B = 0`` the block returns its input
    unchanged.
``full``
    The merged reading :math:`W + BA`, used by stage-1 students and available to
    stage 2 through ``lora.expert_path``.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from samora import Level
from samora.errors import ConfigError
from samora.util.random import seeded, derive_seed
from .attention import multi_head_attention, as_batch

_log = logging.getLogger(__name__)

ADAPTED = ('q', 'v', 'fc1', 'fc2')
EXPERT_PATHS = ('delta', 'full')


@dataclass
class LoraConfig:
    """
    LoRA settings.

    Attributes:
        rank(int): adapter rank *r*.
        expert_path(str): ``'delta'`` or ``'full'``; how stage 2 runs expert paths.
    """
    rank: int = 4
    expert_path: str = 'delta'

    def __post_init__(self):
        if int(self.rank) <= 0:
            raise ConfigError('lora.rank must be positive, got {}'.format(self.rank))
        if self.expert_path not in EXPERT_PATHS:
            raise ConfigError('lora.expert_path must be one of {}'.format(EXPERT_PATHS))


class LoraPair(nn.Module):
    """
    A single adapter computing :math:`x \\mapsto B A x`.

    ``A`` (``r × in``) gets Kaiming-uniform initialization and ``B`` (``out × r``)
    starts at zero, so a fresh adapter contributes nothing.
    """

    def __init__(self, in_dim, out_dim, rank):
        super().__init__()
        self.A = nn.Parameter(torch.empty(rank, in_dim))
        self.B = nn.Parameter(torch.zeros(out_dim, rank))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5))

    @property
    def rank(self):
        return self.A.shape[0]

    def delta(self):
        "The dense weight delta :math:`BA`."
        return self.B @ self.A

    def forward(self, x):
        return F.linear(F.linear(x, self.A), self.B)


class LoraExpertSet(nn.Module):
    """
    One LoRA expert: adapters on the q, v, fc1 and fc2 projections of every
    encoder block.

    Args:
        level(samora.Level or None):
            the expert's level; ``None`` for composite experts.
        rank(int): the adapter rank.
        depth(int): the number of encoder blocks.
        dim(int): the token width.
        hidden(int): the FFN hidden width.
    """

    def __init__(self, level, rank, depth, dim, hidden):
        super().__init__()
        if rank <= 0:
            raise ConfigError('LoRA rank must be positive, got {}'.format(rank))
        if level is not None and rank > dim:
            raise ConfigError('LoRA rank {} exceeds token width {}'.format(rank, dim))
        self.level = Level.parse(level) if level is not None else None
        self.rank = rank
        self.dim = dim
        self.hidden = hidden
        shapes = {'q': (dim, dim), 'v': (dim, dim), 'fc1': (dim, hidden), 'fc2': (hidden, dim)}
        self.blocks = nn.ModuleList([
            nn.ModuleDict({n: LoraPair(i, o, rank) for (n, (i, o)) in shapes.items()})
            for _ in range(depth)
        ])

    @property
    def depth(self):
        return len(self.blocks)

    def adapter(self, index, name):
        """
        Look up an adapter.

        Raises:
            ConfigError: if the expert has no adapter for that block and projection.
        """
        if index < 0 or index >= len(self.blocks) or name not in self.blocks[index]:
            raise ConfigError('{} expert has no {} adapter for block {}'.format(
                self.level.value if self.level else 'composite', name, index))
        return self.blocks[index][name]

    def __str__(self):
        lvl = self.level.value if self.level else 'composite'
        return 'LoraExpertSet({}, r={}, depth={})'.format(lvl, self.rank, self.depth)


def inject_lora(encoder, level, rank=4):
    """
    Create a LoRA expert for a level and register it on the encoder.

    Args:
        encoder(samora.models.encoder.FrozenEncoder): the encoder.
        level(samora.Level or str): the expert level.
        rank(int): the adapter rank.

    Returns:
        LoraExpertSet: the new (trainable) expert, with ``B = 0``.

    Raises:
        ConfigError: if the rank is not positive or the level already has an expert.
    """
    level = Level.parse(level)
    if level.value in encoder.experts:
        raise ConfigError('encoder already has a {} expert'.format(level.value))
    cfg = encoder.config
    with seeded(derive_seed('lora', level, base=cfg.seed)):
        expert = LoraExpertSet(level, rank, cfg.depth, cfg.dim, cfg.hidden_dim)
    encoder.experts[level.value] = expert
    _log.debug('injected %s', expert)
    return expert


def get_expert(encoder, level):
    "Get the encoder's expert for a level, or fail with :class:`ConfigError`."
    level = Level.parse(level)
    if level.value not in encoder.experts:
        raise ConfigError('encoder has no {} expert'.format(level.value))
    return encoder.experts[level.value]


def _check_expert(block, expert, index):
    if expert.dim != block.dim:
        raise ConfigError('expert width {} does not match block width {}'.format(
            expert.dim, block.dim))
    return {n: expert.adapter(index, n) for n in ADAPTED}


def forward_expert_block(block, expert, x, index=0, *, mode='delta', return_weights=False):
    """
    Compute an expert's block output :math:`E_{\\Delta\\theta_i}(x)`:

    .. math::
        x' = x + f_{Attn}(LN(x) | \\Delta\\theta_i) \\qquad
        E(x) = x' + f_{FFN}(LN(x') | \\Delta\\theta_i)

    Args:
        block(samora.models.encoder.EncoderBlock): the frozen block.
        expert(LoraExpertSet): the expert.
        x(torch.Tensor): the block input, ``[L, d]`` or ``[B, L, d]``.
        index(int): the block's index in the encoder.
        mode(str): ``'delta'`` (adapter weights only) or ``'full'`` (merged weights).
        return_weights(bool): also return the attention weights ``[B, h, L, L]``.

    Raises:
        ConfigError: if the expert lacks an adapter for ``index``.
        DimensionError: if ``x`` does not match the block width.
    """
    if mode not in EXPERT_PATHS:
        raise ConfigError('unknown expert path mode {!r}'.format(mode))
    ad = _check_expert(block, expert, index)
    xb, added = as_batch(x, block.dim)
    attn = block.attn
    mlp = block.mlp

    h = block.norm1(xb)
    if mode == 'delta':
        q = ad['q'](h)
        k = F.linear(h, attn.k.weight)
        v = ad['v'](h)
        ctx, weights = multi_head_attention(q, k, v, attn.heads)
        xb = xb + F.linear(ctx, attn.proj.weight)
        h = block.norm2(xb)
        out = xb + ad['fc2'](F.gelu(ad['fc1'](h)))
    else:
        q = attn.q(h) + ad['q'](h)
        k = attn.k(h)
        v = attn.v(h) + ad['v'](h)
        ctx, weights = multi_head_attention(q, k, v, attn.heads)
        xb = xb + attn.proj(ctx)
        h = block.norm2(xb)
        hid = F.gelu(mlp.fc1(h) + ad['fc1'](h))
        out = xb + mlp.fc2(hid) + ad['fc2'](hid)

    if added:
        out = out.squeeze(0)
    if return_weights:
        return out, weights
    return out


def forward_merged_block(block, expert, x, index=0):
    """
    Run a block with the expert merged into its weights, :math:`F_{\\theta + BA}(x)`.
    """
    return forward_expert_block(block, expert, x, index, mode='full')


def expert_deltas(expert, index):
    "The dense weight deltas of one block's adapters, keyed by projection."
    return {n: expert.adapter(index, n).delta() for n in ADAPTED}
