"""
Baseline multi-LoRA fusion strategies: linear arithmetic composition (LAC), a
gated mixture of experts and coefficient-space weight composition.
"""

import logging
import math

import numpy as np
import torch
from torch import nn

from samora import Level
from samora.errors import ConfigError, DimensionError
from samora.models.attention import as_batch
from samora.models.lora import LoraExpertSet, ADAPTED
from samora.util.random import seeded

_log = logging.getLogger(__name__)


def _check_outputs(outputs):
    outputs = list(outputs)
    if len(outputs) != 3:
        raise ValueError('expected three expert outputs, got {}'.format(len(outputs)))
    shape = outputs[0].shape
    if any(o.shape != shape for o in outputs):
        raise DimensionError('expert outputs differ in shape: {}'.format(
            [tuple(o.shape) for o in outputs]))
    return outputs


def lac_fuse(weights, outputs):
    """
    Linear arithmetic composition :math:`\\sum_k w_k e_k`.

    Args:
        weights: three finite weights (sequence or tensor).
        outputs: the three expert outputs (image, patch, pixel).
    """
    outputs = _check_outputs(outputs)
    if not torch.is_tensor(weights):
        weights = torch.as_tensor(weights, dtype=outputs[0].dtype)
    if weights.numel() != 3:
        raise ValueError('LAC needs three weights')
    if not torch.isfinite(weights).all():
        raise ValueError('LAC weights must be finite')
    return sum(weights[k] * outputs[k] for k in range(3))


class LacFusion(nn.Module):
    """
    LAC fusion with fixed or trainable weights (default one third each).
    """

    def __init__(self, weights=(1 / 3, 1 / 3, 1 / 3), trainable=False):
        super().__init__()
        w = torch.tensor(weights, dtype=torch.float32)
        if trainable:
            self.weights = nn.Parameter(w)
        else:
            self.register_buffer('weights', w)

    def forward(self, e_im, e_pa, e_pi, x=None, return_weights=False):
        out = lac_fuse(self.weights, (e_im, e_pa, e_pi))
        if return_weights:
            return out, {'mixture': self.weights.detach()}
        return out


def gated_mixture_fuse(gate, outputs, x, return_weights=False):
    """
    Gated mixture: the softmax of ``gate`` applied to mean-pooled ``x`` weights the
    expert outputs.

    Args:
        gate(torch.nn.Linear): map from token width to three logits.
        outputs: the three expert outputs.
        x(torch.Tensor): the block input, ``[L, d]`` or ``[B, L, d]``.
        return_weights(bool): also return the gate weights ``[B, 3]``.
    """
    outputs = _check_outputs(outputs)
    xb, added = as_batch(x)
    if outputs[0].shape != x.shape:
        raise DimensionError('gate input {} does not match expert outputs {}'.format(
            tuple(x.shape), tuple(outputs[0].shape)))
    w = torch.softmax(gate(xb.mean(dim=1)), dim=-1)
    ob = [as_batch(o)[0] for o in outputs]
    out = sum(w[:, k, None, None] * ob[k] for k in range(3))
    if added:
        out = out.squeeze(0)
    if return_weights:
        return out, w
    return out


class GatedFusion(nn.Module):
    "Gated mixture-of-experts fusion with a trainable linear gate."

    def __init__(self, dim):
        super().__init__()
        self.gate = nn.Linear(dim, 3)
        nn.init.trunc_normal_(self.gate.weight, std=0.02, a=-0.04, b=0.04)
        nn.init.zeros_(self.gate.bias)

    def forward(self, e_im, e_pa, e_pi, x=None, return_weights=False):
        if x is None:
            raise ValueError('gated fusion requires the block input')
        res = gated_mixture_fuse(self.gate, (e_im, e_pa, e_pi), x, return_weights)
        if return_weights:
            out, w = res
            return out, {'mixture': w.detach()}
        return res


class SingleExpertFusion(nn.Module):
    """
    Fusion over a single retained expert: a zero-initialized projection of that
    expert's output.
    """

    def __init__(self, dim, level):
        super().__init__()
        self.level = Level.parse(level)
        self.proj = nn.Linear(dim, dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, e_im, e_pa, e_pi, x=None, return_weights=False):
        e = {Level.IMAGE: e_im, Level.PATCH: e_pa, Level.PIXEL: e_pi}[self.level]
        out = self.proj(e)
        if return_weights:
            return out, {}
        return out


def weight_compose(coeffs, experts):
    """
    Compose experts in weight space.  The composite expert's adapters satisfy
    :math:`\\Delta W = \\sum_i c_i B_i A_i` for every adapted projection; the factors
    are concatenated, so the composite rank is the sum of the expert ranks.

    Args:
        coeffs: three coefficients.
        experts: three :class:`LoraExpertSet` objects with equal rank and shape.

    Returns:
        LoraExpertSet: the (level-less) composite expert.

    Raises:
        ConfigError: if the experts' ranks or shapes differ.
    """
    experts = list(experts)
    coeffs = [float(c) for c in coeffs]
    if len(experts) != len(coeffs):
        raise ValueError('need one coefficient per expert')
    e0 = experts[0]
    for e in experts[1:]:
        if e.rank != e0.rank:
            raise ConfigError('cannot compose experts of rank {} and {}'.format(e0.rank, e.rank))
        if (e.depth, e.dim, e.hidden) != (e0.depth, e0.dim, e0.hidden):
            raise ConfigError('cannot compose experts of different shapes')

    # every factor is overwritten below
    with seeded(0):
        comp = LoraExpertSet(None, e0.rank * len(experts), e0.depth, e0.dim, e0.hidden)
    comp.to(dtype=e0.blocks[0]['q'].A.dtype, device=e0.blocks[0]['q'].A.device)
    with torch.no_grad():
        for i in range(e0.depth):
            for name in ADAPTED:
                pairs = [e.adapter(i, name) for e in experts]
                tgt = comp.adapter(i, name)
                tgt.A.copy_(torch.cat([p.A for p in pairs], 0))
                tgt.B.copy_(torch.cat([c * p.B for (c, p) in zip(coeffs, pairs)], 1))
    comp.requires_grad_(False)
    return comp


class ComposeFusion(nn.Module):
    """
    Holds the composition coefficients for the weight-composition strategy.  The
    composite expert is rebuilt when the coefficients change.
    """

    def __init__(self, coeffs=(0.0, 0.0, 0.0)):
        super().__init__()
        self.register_buffer('coeffs', torch.tensor(coeffs, dtype=torch.float32))
        self._cache = None

    def set_coefficients(self, coeffs):
        with torch.no_grad():
            self.coeffs.copy_(torch.as_tensor(coeffs, dtype=self.coeffs.dtype))
        self._cache = None

    def composite(self, experts):
        key = tuple(float(c) for c in self.coeffs)
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, weight_compose(key, experts))
        return self._cache[1]


def search_coefficients(objective, n=3, *, bounds=(-1.5, 1.5), rounds=20, step=0.5,
                        start=None):
    """
    Gradient-free coordinate search for composition coefficients that maximize
    an objective (e.g. Dice on the labeled few-shot slices).

    Each round tries moving every coordinate by ``±step`` (clipped to ``bounds``)
    and keeps improvements; a round with no improvement halves the step.

    Args:
        objective(callable): maps a coefficient array to a score (higher is better).
        n(int): number of coefficients.
        bounds(tuple): the coefficient range.
        rounds(int): number of rounds.
        step(float): the initial step.
        start(array-like): starting coefficients (default ``1/n`` each).

    Returns:
        tuple: ``(coeffs, score, history)`` where ``history`` lists the best score
        after each round.
    """
    lo, hi = bounds
    c = np.full(n, 1.0 / n) if start is None else np.asarray(start, dtype=np.float64).copy()
    c = np.clip(c, lo, hi)
    best = float(objective(c))
    history = []
    for rnd in range(rounds):
        improved = False
        for i in range(n):
            for sign in (-1, 1):
                cand = c.copy()
                cand[i] = np.clip(cand[i] + sign * step, lo, hi)
                if cand[i] == c[i]:
                    continue
                score = float(objective(cand))
                if score > best:
                    best, c, improved = score, cand, True
        if not improved:
            step /= 2
        history.append(best)
        _log.debug('coefficient search round %d: score %.4f at %s (step %.4f)',
                   rnd, best, c, step)
        if not math.isfinite(best):
            break
    return c, best, history
