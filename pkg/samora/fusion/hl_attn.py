"""
HL-Attn: hierarchical fusion of the three expert outputs of an encoder block.

Two levels are fused first by cross-attention, the hierarchically higher one
providing the queries.  The fused intermediate then takes the level of its
highest constituent and is cross-attended with the remaining level, again with
the higher side as query.  A self-attention pass and a zero-initialized output
projection follow, so a fresh HL-Attn block contributes nothing to the block
output.
"""

import logging

from torch import nn

from samora.errors import DimensionError
from .cross import CrossAttention, FusionOrder

_log = logging.getLogger(__name__)


class HlAttnBlock(nn.Module):
    """
    The trainable HL-Attn unit for one encoder block.

    Args:
        dim(int): token width.
        heads(int): attention heads (the encoder's head count).
        order(FusionOrder or str): the fusion order.
        norm(bool): use layer norms after each attention stage.

    Attributes:
        stage1_cross(CrossAttention): stage-1 cross-attention.
        stage2_cross(CrossAttention): stage-2 cross-attention.
        self_attn(CrossAttention): self-attention after stage 2.
        out_proj(torch.nn.Linear): zero-initialized output projection.
    """

    def __init__(self, dim, heads, order='211', norm=True):
        super().__init__()
        self.order = order if isinstance(order, FusionOrder) else FusionOrder(order)
        self.dim = dim
        self.stage1_cross = CrossAttention(dim, heads, norm)
        self.stage2_cross = CrossAttention(dim, heads, norm)
        self.self_attn = CrossAttention(dim, heads, norm)
        self.out_proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, e_im, e_pa, e_pi, x=None, return_weights=False):
        return hl_attn_fuse(self, e_im, e_pa, e_pi, return_weights=return_weights)


def hl_attn_fuse(h, e_im, e_pa, e_pi, return_weights=False):
    """
    Fuse three expert outputs into :math:`E_\\Omega(x)`.

    Args:
        h(HlAttnBlock): the fusion block.
        e_im, e_pa, e_pi(torch.Tensor): expert outputs of identical shape.
        return_weights(bool):
            also return a dictionary of attention weights, with keys ``stage1``,
            ``stage2`` and ``self``.

    Raises:
        DimensionError: if the expert outputs have different shapes.
    """
    if not (e_im.shape == e_pa.shape == e_pi.shape):
        raise DimensionError('expert outputs differ in shape: {}, {}, {}'.format(
            tuple(e_im.shape), tuple(e_pa.shape), tuple(e_pi.shape)))
    feats = {'image': e_im, 'patch': e_pa, 'pixel': e_pi}
    (q1, kv1), (q2, kv2) = h.order.pairings()

    inter, w1 = h.stage1_cross(feats[q1], feats[kv1], return_weights=True)
    feats['intermediate'] = inter
    fused, w2 = h.stage2_cross(feats[q2], feats[kv2], return_weights=True)
    fused, w3 = h.self_attn(fused, fused, return_weights=True)
    out = h.out_proj(fused)

    if return_weights:
        return out, {'stage1': w1, 'stage2': w2, 'self': w3}
    return out


def block_output(f_theta, e_omega):
    """
    Combine the frozen block output and the fused expert output,
    :math:`O(x) = F_\\theta(x) + E_\\Omega(x)`.
    """
    if f_theta.shape != e_omega.shape:
        raise DimensionError('cannot add block outputs of shape {} and {}'.format(
            tuple(f_theta.shape), tuple(e_omega.shape)))
    return f_theta + e_omega
