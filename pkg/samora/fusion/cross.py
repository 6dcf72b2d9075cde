"""
Cross-attention between expert outputs, and fusion orders.
"""

import logging

from torch import nn

from samora import LEVELS
from samora.errors import ConfigError, DimensionError
from samora.models.attention import multi_head_attention, as_batch
from samora.models.encoder import LN_EPS, trunc_normal_init

_log = logging.getLogger(__name__)


class FusionOrder:
    """
    Assignment of the three levels to the two HL-Attn stages.  Orders are written
    as three digits in image-patch-pixel position; exactly two levels are fused in
    stage 1 and the remaining one in stage 2.

    >>> FusionOrder('211').pairings()
    (('patch', 'pixel'), ('image', 'intermediate'))
    """
    VALID = ('211', '112', '121')

    def __init__(self, code='211'):
        code = str(code)
        if code not in self.VALID:
            raise ConfigError('invalid fusion order {!r}; valid orders are {}'.format(
                code, ', '.join(self.VALID)))
        self.code = code
        self.stage = {lvl: int(c) for (lvl, c) in zip(LEVELS, code)}

    @property
    def stage1(self):
        "The two stage-1 levels, higher level first."
        lvls = [lvl for lvl in LEVELS if self.stage[lvl] == 1]
        return tuple(sorted(lvls, key=lambda lvl: -lvl.rank))

    @property
    def stage2(self):
        "The stage-2 level."
        return next(lvl for lvl in LEVELS if self.stage[lvl] == 2)

    @property
    def intermediate_level(self):
        "The level the stage-1 output inherits (its highest constituent)."
        return self.stage1[0]

    def pairings(self):
        """
        Get the query/key-value roles of both stages.

        Returns:
            tuple:
                ``((q1, kv1), (q2, kv2))`` of level names; stage-2 entries use
                ``'intermediate'`` for the stage-1 output.
        """
        s1 = self.stage1
        s2 = self.stage2
        if s2.rank > self.intermediate_level.rank:
            st2 = (s2.value, 'intermediate')
        else:
            st2 = ('intermediate', s2.value)
        return ((s1[0].value, s1[1].value), st2)

    def __eq__(self, other):
        return isinstance(other, FusionOrder) and other.code == self.code

    def __hash__(self):
        return hash(self.code)

    def __str__(self):
        return self.code

    def __repr__(self):
        return 'FusionOrder({!r})'.format(self.code)


class CrossAttention(nn.Module):
    """
    Multi-head cross-attention parameters: query, key and value projections, a
    zero-initialized output projection and a layer norm.

    Args:
        dim(int): token width.
        heads(int): number of heads.
        norm(bool): apply the output layer norm; ``False`` replaces it by identity.
    """

    def __init__(self, dim, heads, norm=True):
        super().__init__()
        if dim % heads:
            raise ConfigError('width {} not divisible by {} heads'.format(dim, heads))
        self.dim = dim
        self.heads = heads
        self.W_q = nn.Linear(dim, dim)
        self.W_k = nn.Linear(dim, dim)
        self.W_v = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS) if norm else nn.Identity()
        trunc_normal_init(self)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, q_feat, kv_feat, return_weights=False):
        return cross_attend(self, q_feat, kv_feat, return_weights=return_weights)


def cross_attend(p, q_feat, kv_feat, return_weights=False):
    """
    Cross-attend from ``q_feat`` to ``kv_feat``:

    .. math::
        LN\\left(Q_H + W_o \\, \\mathrm{softmax}\\left(\\frac{Q K^T}{\\sqrt{d_k}}\\right) V\\right)

    with :math:`Q = W_q Q_H`, :math:`K = W_k K_L` and :math:`V = W_v V_L`.

    Args:
        p(CrossAttention): the parameters.
        q_feat(torch.Tensor): query-side features, ``[L, d]`` or ``[B, L, d]``.
        kv_feat(torch.Tensor): key/value-side features, same layout.
        return_weights(bool): also return the attention weights ``[B, h, Lq, Lk]``.
    """
    qb, added = as_batch(q_feat, p.dim)
    kb, k_added = as_batch(kv_feat, p.dim)
    if added != k_added or qb.shape[0] != kb.shape[0]:
        raise DimensionError('query {} and key/value {} batches differ'.format(
            tuple(q_feat.shape), tuple(kv_feat.shape)))
    ctx, weights = multi_head_attention(p.W_q(qb), p.W_k(kb), p.W_v(kb), p.heads)
    out = p.norm(qb + p.out_proj(ctx))
    if added:
        out = out.squeeze(0)
    if return_weights:
        return out, weights
    return out
