"""
Toy teacher models for stage-1 distillation.

The image-level teacher is a small convolutional encoder with a contrastive
projection head; the patch-level teacher is a small ViT with a masked-patch
reconstruction head.  Both start from random weights, are continually
pre-trained on the unlabeled corpus, and are frozen before distillation.
"""

import logging
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from samora.errors import ConfigError, DimensionError, FrozenModelError
from samora.util.random import seeded, derive_seed
from .encoder import EncoderBlock, LN_EPS, trunc_normal_init

_log = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    """
    Shape of a toy teacher.

    Attributes:
        kind(str): ``'conv'`` (image level) or ``'vit'`` (patch level).
        width(int): base channel count (conv) or token width (ViT).
        depth(int): conv stages or transformer blocks.
        heads(int): attention heads (ViT only).
        proj_dim(int): contrastive embedding width (conv only).
        seed(int): initialization seed.
    """
    kind: str = 'conv'
    width: int = 32
    depth: int = 4
    heads: int = 4
    proj_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ('conv', 'vit'):
            raise ConfigError('teacher.kind must be conv or vit, got {!r}'.format(self.kind))
        if self.width <= 0 or self.depth <= 0:
            raise ConfigError('teacher width and depth must be positive')
        if self.kind == 'vit' and self.width % self.heads:
            raise ConfigError('teacher.width must be divisible by teacher.heads')


class ConvTeacher(nn.Module):
    """
    Image-level teacher: ``depth`` strided conv stages (GroupNorm + GELU), global
    average pooling and a 2-layer MLP projection head.

    Attributes:
        feature_dim(int): width of the pooled global feature.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        with seeded(derive_seed('teacher-conv', base=config.seed)):
            layers = []
            ch_in, ch = 1, config.width
            for _ in range(config.depth):
                layers += [nn.Conv2d(ch_in, ch, 3, stride=2, padding=1),
                           nn.GroupNorm(min(8, ch), ch), nn.GELU()]
                ch_in, ch = ch, ch * 2
            self.body = nn.Sequential(*layers)
            self.feature_dim = ch_in
            self.head = nn.Sequential(
                nn.Linear(ch_in, ch_in), nn.GELU(), nn.Linear(ch_in, config.proj_dim)
            )
            trunc_normal_init(self)

    def features(self, images):
        "Pooled global features ``[B, feature_dim]``."
        if images.dim() == 3:
            images = images.unsqueeze(1)
        return self.body(images).mean(dim=(2, 3))

    def embed(self, images):
        "Contrastive embeddings ``[B, proj_dim]``."
        return self.head(self.features(images))

    def forward(self, images):
        return self.features(images)


class ViTTeacher(nn.Module):
    """
    Patch-level teacher: a small ViT whose masked tokens are replaced by a learned
    mask token, with a linear head reconstructing the pixels of each patch.

    Args:
        config(TeacherConfig): the teacher shape.
        image_size(int): input edge.
        patch_size(int): patch edge; matches the student so token grids align.
    """

    def __init__(self, config, image_size, patch_size):
        super().__init__()
        if image_size % patch_size:
            raise ConfigError('teacher image size must be divisible by patch size')
        self.config = config
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        d = config.width
        self.feature_dim = d
        with seeded(derive_seed('teacher-vit', base=config.seed)):
            self.patch_embed = nn.Conv2d(1, d, patch_size, stride=patch_size)
            self.pos_embed = nn.Parameter(torch.zeros(1, self.grid ** 2, d))
            self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
            self.blocks = nn.ModuleList([
                EncoderBlock(d, config.heads) for _ in range(config.depth)
            ])
            self.norm = nn.LayerNorm(d, eps=LN_EPS)
            self.recon = nn.Linear(d, patch_size ** 2)
            trunc_normal_init(self)
            nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)
            nn.init.trunc_normal_(self.mask_token, std=0.02, a=-0.04, b=0.04)

    def features(self, images, mask=None):
        """
        Per-token features ``[B, L, width]``.

        Args:
            images(torch.Tensor): ``[B, 1, H, W]`` images.
            mask(torch.Tensor or None): boolean ``[B, L]``, true for masked tokens.
        """
        if images.dim() == 3:
            images = images.unsqueeze(1)
        if tuple(images.shape[-2:]) != (self.image_size, self.image_size):
            raise DimensionError('teacher expects {0}×{0} images'.format(self.image_size))
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        if mask is not None:
            m = mask.unsqueeze(-1).to(x.dtype)
            x = x * (1 - m) + self.mask_token * m
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def reconstruct(self, images, mask):
        "Predicted patch pixels ``[B, L, patch_size²]``."
        return self.recon(self.features(images, mask))

    def forward(self, images):
        return self.features(images)


def patchify(images, patch_size):
    "Split ``[B, 1, H, W]`` images into ``[B, L, patch_size²]`` patch vectors."
    if images.dim() == 3:
        images = images.unsqueeze(1)
    p = F.unfold(images, patch_size, stride=patch_size)
    return p.transpose(1, 2)


def build_teacher(config, image_size, patch_size):
    "Construct a teacher from its configuration."
    if config.kind == 'conv':
        return ConvTeacher(config)
    else:
        return ViTTeacher(config, image_size, patch_size)


def freeze(model):
    "Freeze a model's parameters and put it in evaluation mode."
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def is_frozen(model):
    "Query whether no parameter of a model requires gradients."
    return not any(p.requires_grad for p in model.parameters())


def require_frozen(model, what='teacher'):
    "Raise :class:`FrozenModelError` unless ``model`` is frozen."
    if not is_frozen(model):
        raise FrozenModelError('{} must be frozen before distillation'.format(what))
