"""
Scaled dot-product attention shared by the encoder, the expert paths and HL-Attn.
"""

import math

import torch

from samora.errors import DimensionError


def split_heads(x, heads):
    "Reshape ``[B, L, d]`` into ``[B, heads, L, d/heads]``."
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x):
    "Inverse of :func:`split_heads`."
    b, h, n, dk = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dk)


def multi_head_attention(q, k, v, heads):
    """
    Multi-head scaled dot-product attention on already-projected queries, keys and
    values.

    .. math::
        \\mathrm{softmax}\\left(\\frac{Q K^T}{\\sqrt{d_k}}\\right) V

    computed independently per head and concatenated.

    Args:
        q(torch.Tensor): queries, ``[B, Lq, d]``.
        k(torch.Tensor): keys, ``[B, Lk, d]``.
        v(torch.Tensor): values, ``[B, Lk, d]``.
        heads(int): the number of heads; must divide ``d``.

    Returns:
        tuple: ``(context, weights)`` with context ``[B, Lq, d]`` and attention weights
        ``[B, heads, Lq, Lk]`` (rows sum to 1).
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise DimensionError('attention shape mismatch: q {}, k {}, v {}'.format(
            tuple(q.shape), tuple(k.shape), tuple(v.shape)))
    d = q.shape[-1]
    if d % heads:
        raise DimensionError('dimension {} not divisible by {} heads'.format(d, heads))
    dk = d // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = torch.matmul(qh, kh.transpose(-2, -1)) / math.sqrt(dk)
    weights = torch.softmax(logits, dim=-1)
    ctx = torch.matmul(weights, vh)
    return merge_heads(ctx), weights


def as_batch(x, dim=None):
    """
    Accept a feature sequence as ``[L, d]`` or ``[B, L, d]``, returning the batched
    form and whether a batch axis was added.

    Args:
        x(torch.Tensor): the features.
        dim(int or None): if given, the required token width.
    """
    if x.dim() == 2:
        x = x.unsqueeze(0)
        added = True
    elif x.dim() == 3:
        added = False
    else:
        raise DimensionError('feature sequence must be [L, d] or [B, L, d], got {}'.format(
            tuple(x.shape)))
    if dim is not None and x.shape[-1] != dim:
        raise DimensionError('expected token width {}, got {}'.format(dim, x.shape[-1]))
    return x, added
