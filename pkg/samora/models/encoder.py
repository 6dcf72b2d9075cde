"""
The frozen ViT-style student encoder.

The encoder stands in for the SAM image encoder: a patch embedding followed by
``depth`` pre-LN transformer blocks.  Its weights are randomly initialized from
``EncoderConfig.seed`` and frozen immediately; stage 1 and stage 2 rebuild the
exact same encoder from the same configuration.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from samora.errors import ConfigError, DimensionError
from samora.util.random import seeded, derive_seed
from .attention import multi_head_attention, as_batch

_log = logging.getLogger(__name__)

LN_EPS = 1e-6


@dataclass
class EncoderConfig:
    """
    Shape of the student encoder.

    Attributes:
        depth(int): number of transformer blocks.
        dim(int): token width *d*.
        heads(int): attention heads; must divide ``dim``.
        patch_size(int): patch edge in pixels; a power of two.
        image_size(int): input edge in pixels; divisible by ``patch_size``.
        mlp_ratio(float): FFN hidden width as a multiple of ``dim``.
        seed(int): seed for the (frozen) random weights.
    """
    depth: int = 6
    dim: int = 128
    heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ['depth', 'dim', 'heads', 'patch_size', 'image_size']:
            if int(getattr(self, name)) <= 0:
                raise ConfigError('encoder.{} must be positive'.format(name))
        if self.dim % self.heads:
            raise ConfigError('encoder.dim ({}) must be divisible by heads ({})'.format(
                self.dim, self.heads))
        if self.image_size % self.patch_size:
            raise ConfigError('encoder.image_size must be divisible by patch_size')
        if self.patch_size & (self.patch_size - 1):
            raise ConfigError('encoder.patch_size must be a power of two')
        if self.mlp_ratio <= 0:
            raise ConfigError('encoder.mlp_ratio must be positive')

    @property
    def grid(self):
        "Number of patches along each image edge."
        return self.image_size // self.patch_size

    @property
    def seq_len(self):
        "Sequence length *L*."
        return self.grid ** 2

    @property
    def hidden_dim(self):
        "FFN hidden width."
        return int(round(self.dim * self.mlp_ratio))


def trunc_normal_init(module, std=0.02):
    """
    Initialize linear and convolution weights from a truncated normal and zero
    their biases; layer norms get unit scale and zero shift.
    """
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class Attention(nn.Module):
    """
    Multi-head self-attention with separate q, k, v and output projections, so LoRA
    adapters can be attached to individual projections.
    """

    def __init__(self, dim, heads):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_weights=False):
        ctx, weights = multi_head_attention(self.q(x), self.k(x), self.v(x), self.heads)
        out = self.proj(ctx)
        if return_weights:
            return out, weights
        return out


class Mlp(nn.Module):
    "Two-layer GELU feed-forward network."

    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """
    A pre-LN transformer block parameterized by θ.  Its output is

    .. math::
        x' = x + f_{Attn}(LN(x)) \\qquad F_\\theta(x) = x' + f_{FFN}(LN(x'))
    """

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, int(round(dim * mlp_ratio)))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def forward_frozen_block(block, x):
    """
    Compute the frozen block output :math:`F_\\theta(x)`.

    Args:
        block(EncoderBlock): the block.
        x(torch.Tensor): features ``[L, d]`` or ``[B, L, d]``.

    Returns:
        torch.Tensor: the block output, same shape as ``x``.
    """
    xb, added = as_batch(x, block.dim)
    out = block(xb)
    return out.squeeze(0) if added else out


class FrozenEncoder(nn.Module):
    """
    The frozen student encoder: patch embedding, positional embedding, transformer
    blocks and a final layer norm.  LoRA experts injected with
    :func:`samora.models.lora.inject_lora` live in :attr:`experts`.

    Args:
        config(EncoderConfig): the encoder shape.
        freeze(bool): freeze all encoder parameters after construction.
    """

    def __init__(self, config, *, freeze=True):
        super().__init__()
        self.config = config
        d = config.dim
        with seeded(derive_seed('encoder', base=config.seed)):
            self.patch_embed = nn.Conv2d(1, d, config.patch_size, stride=config.patch_size)
            self.pos_embed = nn.Parameter(torch.zeros(1, config.seq_len, d))
            self.blocks = nn.ModuleList([
                EncoderBlock(d, config.heads, config.mlp_ratio) for _ in range(config.depth)
            ])
            self.norm = nn.LayerNorm(d, eps=LN_EPS)
            trunc_normal_init(self)
            nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)
            # conv fan-in for one channel is tiny; scale to keep token norms O(1)
            nn.init.normal_(self.patch_embed.weight, std=1.0 / math.sqrt(config.patch_size ** 2))
        self.experts = nn.ModuleDict()
        if freeze:
            self.freeze()

    def freeze(self):
        "Freeze every non-expert parameter."
        for name, p in self.named_parameters():
            if not name.startswith('experts.'):
                p.requires_grad_(False)

    def frozen_parameters(self):
        "Named parameters that belong to θ (everything except the experts)."
        return [(n, p) for (n, p) in self.named_parameters() if not n.startswith('experts.')]

    def embed(self, images):
        """
        Embed a batch of single-channel images ``[B, 1, H, W]`` (or ``[B, H, W]``) into
        tokens ``[B, L, d]``.
        """
        if images.dim() == 3:
            images = images.unsqueeze(1)
        size = self.config.image_size
        if images.dim() != 4 or images.shape[1] != 1 or tuple(images.shape[-2:]) != (size, size):
            raise DimensionError('expected images [B, 1, {0}, {0}], got {1}'.format(
                size, tuple(images.shape)))
        x = self.patch_embed(images)
        x = x.flatten(2).transpose(1, 2)
        return x + self.pos_embed

    def forward(self, images, level=None, return_hidden=False):
        """
        Encode images to final (normalized) token features.

        Args:
            images(torch.Tensor): ``[B, 1, H, W]`` input images.
            level(samora.Level or None):
                if given, run the blocks with that level's LoRA expert merged into the
                frozen weights (the stage-1 student); otherwise run the plain frozen
                encoder.

        Returns:
            torch.Tensor:
                token features ``[B, L, d]``; with ``return_hidden``, also the list
                of (unnormalized) block outputs.
        """
        x = self.embed(images)
        hidden = []
        if level is None:
            for blk in self.blocks:
                x = blk(x)
                hidden.append(x)
        else:
            from .lora import forward_merged_block, get_expert
            expert = get_expert(self, level)
            for i, blk in enumerate(self.blocks):
                x = forward_merged_block(blk, expert, x, i)
                hidden.append(x)
        if return_hidden:
            return self.norm(x), hidden
        return self.norm(x)
