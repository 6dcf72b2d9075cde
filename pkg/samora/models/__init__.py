"""
Model components: the frozen encoder, LoRA experts, decoders, teachers and the
assembled stage-2 model.
"""

from .encoder import (  # noqa: F401
    EncoderConfig, EncoderBlock, FrozenEncoder, forward_frozen_block
)
from .lora import (  # noqa: F401
    LoraConfig, LoraPair, LoraExpertSet, inject_lora, get_expert,
    forward_expert_block, forward_merged_block
)
from .decoder import (  # noqa: F401
    SegDecoder, DenoiseDecoder, Projector, forward_decoder, project_features
)
from .teachers import (  # noqa: F401
    TeacherConfig, ConvTeacher, ViTTeacher, build_teacher, freeze, is_frozen
)
