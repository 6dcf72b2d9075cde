"""
Fusion of the per-level LoRA expert outputs.

The fusion strategy is selected with ``fusion.strategy``:

``hl_attn``
    Hierarchical cross-attention (:mod:`samora.fusion.hl_attn`).
``lac``
    Linear arithmetic composition of expert outputs.
``gated``
    Softmax-gated mixture of expert outputs.
``compose``
    Weight-space composition of the experts with searched coefficients.

When ``fusion.levels`` names a single level, the model keeps only that expert
and uses :class:`~samora.fusion.baselines.SingleExpertFusion`.
"""

import logging
from dataclasses import dataclass, field

from torch import nn

from samora import Level, LEVELS
from samora.errors import ConfigError
from .cross import FusionOrder, CrossAttention, cross_attend  # noqa: F401
from .hl_attn import HlAttnBlock, hl_attn_fuse, block_output  # noqa: F401
from .baselines import (  # noqa: F401
    LacFusion, GatedFusion, SingleExpertFusion, ComposeFusion,
    lac_fuse, gated_mixture_fuse, weight_compose, search_coefficients
)

_log = logging.getLogger(__name__)

STRATEGIES = ('hl_attn', 'lac', 'gated', 'compose')


@dataclass
class FusionConfig:
    """
    Fusion settings.

    Attributes:
        strategy(str): one of ``hl_attn``, ``lac``, ``gated``, ``compose``.
        order(str): HL-Attn fusion order (``211``, ``112`` or ``121``).
        levels(list): the retained expert levels.
        norm(bool): layer norms inside HL-Attn.
        lac_weights(list): initial LAC weights.
        lac_trainable(bool): train the LAC weights in stage 2.
        compose_rounds(int): coefficient-search rounds.
        compose_bounds(list): coefficient range.
    """
    strategy: str = 'hl_attn'
    order: str = '211'
    levels: list = field(default_factory=lambda: [lvl.value for lvl in LEVELS])
    norm: bool = True
    lac_weights: list = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    lac_trainable: bool = False
    compose_rounds: int = 20
    compose_bounds: list = field(default_factory=lambda: [-1.5, 1.5])

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError('fusion.strategy must be one of {}, got {!r}'.format(
                STRATEGIES, self.strategy))
        self.order = str(self.order)
        FusionOrder(self.order)
        lvls = [Level.parse(lvl) for lvl in self.levels]
        if len(set(lvls)) != len(lvls) or len(lvls) not in (1, 3):
            raise ConfigError('fusion.levels must name one level or all three')
        self.levels = [lvl.value for lvl in LEVELS if lvl in lvls]
        if len(self.lac_weights) != 3:
            raise ConfigError('fusion.lac_weights needs three values')

    @property
    def single_level(self):
        "The retained level when only one expert is kept, else ``None``."
        if len(self.levels) == 1:
            return Level.parse(self.levels[0])
        return None


def build_fusion(config, dim, heads, depth):
    """
    Build the per-block fusion modules for a configuration.

    Returns:
        torch.nn.ModuleList or ComposeFusion:
            one fusion module per block, or the shared coefficient holder for the
            ``compose`` strategy.
    """
    single = config.single_level
    if single is not None:
        return nn.ModuleList([SingleExpertFusion(dim, single) for _ in range(depth)])
    if config.strategy == 'hl_attn':
        return nn.ModuleList([
            HlAttnBlock(dim, heads, config.order, config.norm) for _ in range(depth)
        ])
    elif config.strategy == 'lac':
        return nn.ModuleList([
            LacFusion(config.lac_weights, config.lac_trainable) for _ in range(depth)
        ])
    elif config.strategy == 'gated':
        return nn.ModuleList([GatedFusion(dim) for _ in range(depth)])
    else:
        return ComposeFusion()
