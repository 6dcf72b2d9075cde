"""
Stage-1 pretext tasks: teacher continual pre-training, distillation into the
image and patch experts, and pixel-level denoising.
"""

from .losses import recon_loss, nt_xent_loss  # noqa: F401
from .corrupt import mae_mask, add_noise  # noqa: F401
from .train import PretextConfig, pretext_schedule_lr, smooth_losses  # noqa: F401
from .cpt import cpt_teacher  # noqa: F401
from .distill import distill_level, PretextResult  # noqa: F401
from .denoise import pretrain_pixel, denoise_psnr  # noqa: F401
