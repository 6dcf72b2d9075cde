"""
Pretext losses.
"""

import torch
import torch.nn.functional as F

from samora.errors import DimensionError


def recon_loss(f_out, g_out):
    """
    Reconstruction loss between target features ``F(x)`` and model features
    ``G(x)``, normalized per element:

    .. math::
        \\frac{1}{n} \\sum_i \\frac{\\|F(x_i) - G(x_i)\\|_2^2}{|x_i|}

    It is symmetric and zero exactly when the inputs are equal.
    """
    if f_out.shape != g_out.shape:
        raise DimensionError('reconstruction inputs differ in shape: {} vs {}'.format(
            tuple(f_out.shape), tuple(g_out.shape)))
    return torch.mean((f_out - g_out) ** 2)


def nt_xent_loss(z_a, z_b, tau=0.1):
    """
    Normalized temperature-scaled cross-entropy over ``2B`` embeddings, where the
    positive for each view is the other view of the same item and the remaining
    ``2B - 2`` embeddings are negatives.

    Args:
        z_a(torch.Tensor): ``[B, k]`` embeddings of the first views.
        z_b(torch.Tensor): ``[B, k]`` embeddings of the second views.
        tau(float): the temperature.

    Raises:
        ValueError: if the batch has fewer than 2 items or ``tau`` is not positive.
    """
    if z_a.shape != z_b.shape or z_a.dim() != 2:
        raise DimensionError('NT-Xent views must both be [B, k]')
    n = z_a.shape[0]
    if n < 2:
        raise ValueError('NT-Xent needs a batch of at least 2 (got {})'.format(n))
    if tau <= 0:
        raise ValueError('temperature must be positive')
    z = F.normalize(torch.cat([z_a, z_b], 0), dim=1)
    sim = z @ z.t() / tau
    eye = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float('-inf'))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)]).to(z.device)
    return F.cross_entropy(sim, targets)
