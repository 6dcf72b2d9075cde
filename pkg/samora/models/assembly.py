"""
The assembled stage-2 SAMora model.
"""

import logging

from torch import nn

from samora import Level, LEVELS
from samora.errors import ConfigError
from samora.util.random import seeded, derive_seed
from samora.fusion import FusionConfig, build_fusion, block_output, ComposeFusion
from .encoder import FrozenEncoder, forward_frozen_block
from .lora import LoraConfig, inject_lora, forward_expert_block, forward_merged_block
from .decoder import SegDecoder, forward_decoder

_log = logging.getLogger(__name__)

DELTA_INPUT_STRATEGIES = ('lac', 'gated')


class SAMoraModel(nn.Module):
    """
    Frozen encoder with LoRA experts, per-block fusion and a segmentation decoder.
    Each encoder block computes

    .. math::
        O(x) = F_\\theta(x) + E_\\Omega(x)

    where :math:`E_\\Omega` fuses the expert outputs.  LAC and gated fusion combine
    each expert's residual contribution :math:`E_{\\Delta\\theta_k}(x) - x` (on the
    ``full`` expert path, the deviation from :math:`F_\\theta(x)`); weight
    composition instead runs the block with the composite expert merged in.

    The encoder and experts are frozen; only :attr:`fusion` and :attr:`decoder`
    are trainable.

    Args:
        encoder_config(samora.models.encoder.EncoderConfig): the encoder shape.
        lora_config(samora.models.lora.LoraConfig): LoRA settings.
        fusion_config(samora.fusion.FusionConfig): fusion settings.
        num_classes(int): foreground classes.
        seed(int): seed for the trainable components.
    """

    def __init__(self, encoder_config, lora_config=None, fusion_config=None, num_classes=4,
                 seed=0):
        super().__init__()
        self.lora_config = lora_config or LoraConfig()
        self.fusion_config = fusion_config or FusionConfig()
        self.num_classes = num_classes
        self.encoder = FrozenEncoder(encoder_config)
        self.levels = [Level.parse(lvl) for lvl in self.fusion_config.levels]
        for lvl in self.levels:
            inject_lora(self.encoder, lvl, self.lora_config.rank).requires_grad_(False)

        ec = encoder_config
        with seeded(derive_seed('fusion', base=seed)):
            self.fusion = build_fusion(self.fusion_config, ec.dim, ec.heads, ec.depth)
        self.decoder = SegDecoder(ec.dim, ec.grid, ec.patch_size, num_classes,
                                  seed=derive_seed('decoder', base=seed))

    @property
    def strategy(self):
        if self.fusion_config.single_level is not None:
            return 'single'
        return self.fusion_config.strategy

    def expert(self, level):
        level = Level.parse(level)
        if level.value not in self.encoder.experts:
            raise ConfigError('model has no {} expert'.format(level.value))
        return self.encoder.experts[level.value]

    def experts(self):
        "The retained experts in hierarchy order."
        return [self.expert(lvl) for lvl in self.levels]

    def trainable_named_parameters(self):
        "Named fusion and decoder parameters."
        named = [('fusion.' + n, p) for (n, p) in self.fusion.named_parameters()]
        named += [('decoder.' + n, p) for (n, p) in self.decoder.named_parameters()]
        return named

    def frozen_named_parameters(self):
        "Named encoder and expert parameters."
        return [('encoder.' + n, p) for (n, p) in self.encoder.named_parameters()]

    def features(self, images, return_attention=False):
        """
        Encode images through the fused encoder.

        Returns:
            torch.Tensor or tuple:
                final tokens ``[B, L, d]``, plus (if requested) the last block's
                attention weights keyed by level name and ``'fused'``.
        """
        enc = self.encoder
        x = enc.embed(images)
        mode = self.lora_config.expert_path
        last = len(enc.blocks) - 1
        attn = {}
        for i, blk in enumerate(enc.blocks):
            want = return_attention and i == last
            if isinstance(self.fusion, ComposeFusion):
                if want:
                    attn = self._expert_attention(blk, x, i, mode)
                comp = self.fusion.composite(self.experts())
                x = forward_merged_block(blk, comp, x, i)
                continue

            f = forward_frozen_block(blk, x)
            outs = {}
            for lvl in self.levels:
                res = forward_expert_block(blk, self.expert(lvl), x, i, mode=mode,
                                           return_weights=want)
                if want:
                    outs[lvl], attn[lvl.value] = res
                else:
                    outs[lvl] = res
            if self.strategy in DELTA_INPUT_STRATEGIES:
                # an expert's contribution is its deviation from the block it adapts
                base = x if mode == 'delta' else f
                outs = {lvl: e - base for (lvl, e) in outs.items()}
            args = [outs.get(lvl) for lvl in LEVELS]
            if want:
                e_omega, fw = self.fusion[i](*args, x=x, return_weights=True)
                if 'stage2' in fw:
                    attn['fused'] = fw['stage2']
                if 'mixture' in fw:
                    attn['mixture'] = fw['mixture']
            else:
                e_omega = self.fusion[i](*args, x=x)
            x = block_output(f, e_omega)

        x = enc.norm(x)
        if return_attention:
            return x, attn
        return x

    def _expert_attention(self, blk, x, i, mode):
        attn = {}
        for lvl in self.levels:
            _, attn[lvl.value] = forward_expert_block(blk, self.expert(lvl), x, i, mode=mode,
                                                      return_weights=True)
        return attn

    def forward(self, images, return_attention=False):
        """
        Segment a batch of images.

        Args:
            images(torch.Tensor): ``[B, 1, H, W]`` normalized images.
            return_attention(bool): also return last-block attention weights.

        Returns:
            torch.Tensor: logits ``[B, C+1, H, W]`` (and the attention dictionary).
        """
        if return_attention:
            feats, attn = self.features(images, True)
            return forward_decoder(self.decoder, feats), attn
        return forward_decoder(self.decoder, self.features(images))

    def frozen_forward(self, images):
        "Output of the frozen encoder and the decoder, ignoring experts and fusion."
        return forward_decoder(self.decoder, self.encoder(images))
