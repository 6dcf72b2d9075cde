"""
Decoders and the stage-1 dimension-alignment projector.
"""

import logging
import math

import torch
from torch import nn
import torch.nn.functional as F

from samora.errors import DimensionError
from samora.util.random import seeded, derive_seed
from .attention import as_batch
from .encoder import trunc_normal_init

_log = logging.getLogger(__name__)


def _upsampler(dim, patch_size, min_channels=16):
    """
    Build a stack of 2× transposed-convolution stages taking ``dim`` channels at the
    token grid up to full image resolution.  Returns the stack and its output width.
    """
    n_stages = int(round(math.log2(patch_size)))
    layers = []
    ch = dim
    for _ in range(n_stages):
        out = max(ch // 2, min_channels)
        layers.append(nn.ConvTranspose2d(ch, out, 2, stride=2))
        layers.append(nn.GELU())
        ch = out
    return nn.Sequential(*layers), ch


def tokens_to_grid(features, grid):
    "Reshape ``[B, L, d]`` tokens to a ``[B, d, g, g]`` feature map."
    b, n, d = features.shape
    return features.transpose(1, 2).reshape(b, d, grid, grid)


class SegDecoder(nn.Module):
    """
    Prompt-free segmentation decoder: an upsampling stack of ``log2(patch_size)``
    transposed-convolution stages followed by a per-class 1×1 head.  Channel 0 of
    the output is background.

    Args:
        dim(int): encoder token width.
        grid(int): token grid edge (``image_size / patch_size``).
        patch_size(int): encoder patch edge.
        num_classes(int): number of foreground classes.
        seed(int): initialization seed.
    """

    def __init__(self, dim, grid, patch_size, num_classes, seed=0):
        super().__init__()
        self.dim = dim
        self.grid = grid
        self.patch_size = patch_size
        self.num_classes = num_classes
        with seeded(derive_seed('seg-decoder', base=seed)):
            self.up, ch = _upsampler(dim, patch_size)
            self.head = nn.Conv2d(ch, num_classes + 1, 1)
            trunc_normal_init(self)

    @property
    def resolution(self):
        return self.grid * self.patch_size

    def forward(self, features):
        return forward_decoder(self, features)


def forward_decoder(dec, features):
    """
    Decode final encoder features into per-class logits.

    Args:
        dec(SegDecoder): the decoder.
        features(torch.Tensor): ``[L, d]`` or ``[B, L, d]`` token features.

    Returns:
        torch.Tensor: logits ``[C+1, H, W]`` (or ``[B, C+1, H, W]`` for batched input).

    Raises:
        DimensionError: if the features do not match the decoder's grid.
    """
    fb, added = as_batch(features, dec.dim)
    if fb.shape[1] != dec.grid ** 2:
        raise DimensionError('decoder expects {} tokens, got {}'.format(
            dec.grid ** 2, fb.shape[1]))
    logits = dec.head(dec.up(tokens_to_grid(fb, dec.grid)))
    return logits.squeeze(0) if added else logits


class DenoiseDecoder(nn.Module):
    """
    U-Net-style reconstruction decoder for the pixel-level denoising pretext.  The
    bottleneck takes the final encoder tokens together with a skip connection
    from a middle encoder block; the upsampling path mirrors :class:`SegDecoder`
    and ends in a single-channel image.
    """

    def __init__(self, dim, grid, patch_size, seed=0):
        super().__init__()
        self.dim = dim
        self.grid = grid
        self.patch_size = patch_size
        with seeded(derive_seed('denoise-decoder', base=seed)):
            self.fuse = nn.Conv2d(2 * dim, dim, 1)
            self.up, ch = _upsampler(dim, patch_size)
            self.refine = nn.Conv2d(ch, ch, 3, padding=1)
            self.head = nn.Conv2d(ch, 1, 1)
            trunc_normal_init(self)

    def forward(self, features, skip):
        """
        Args:
            features(torch.Tensor): final tokens ``[B, L, d]``.
            skip(torch.Tensor): middle-block tokens ``[B, L, d]``.

        Returns:
            torch.Tensor: reconstructed images ``[B, 1, H, W]``.
        """
        if features.shape != skip.shape or features.shape[-1] != self.dim:
            raise DimensionError('denoise decoder inputs must both be [B, {}, {}]'.format(
                self.grid ** 2, self.dim))
        x = torch.cat([tokens_to_grid(features, self.grid), tokens_to_grid(skip, self.grid)], 1)
        x = F.gelu(self.fuse(x))
        x = self.up(x)
        x = x + F.gelu(self.refine(x))
        return self.head(x)


class Projector(nn.Module):
    """
    Trainable linear map from teacher feature space to student feature space.
    """

    def __init__(self, teacher_dim, student_dim, seed=0):
        super().__init__()
        self.teacher_dim = teacher_dim
        self.student_dim = student_dim
        with seeded(derive_seed('projector', base=seed)):
            self.linear = nn.Linear(teacher_dim, student_dim)
            trunc_normal_init(self)

    def forward(self, feat):
        return project_features(self, feat)


def project_features(p, teacher_feat):
    """
    Map teacher features into the student's token width.

    Args:
        p(Projector): the projector.
        teacher_feat(torch.Tensor): features whose last axis has the teacher width.

    Returns:
        torch.Tensor: features with last axis of the student width.
    """
    if teacher_feat.shape[-1] != p.teacher_dim:
        raise DimensionError('projector expects width {}, got {}'.format(
            p.teacher_dim, teacher_feat.shape[-1]))
    return p.linear(teacher_feat)
