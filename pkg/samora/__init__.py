"""
The SAMora package: hierarchical self-supervised LoRA experts and HL-Attn fusion
for prompt-free segmentation, at desk scale.
"""

from enum import Enum

from .errors import (  # noqa: F401
    SamoraError, ConfigError, DimensionError, CheckpointError,
    ProtocolError, FrozenModelError, DataWarning
)

__version__ = '0.1.0'


class Level(Enum):
    """
    The three hierarchical levels of LoRA experts.  Iteration order is the
    hierarchy order, highest (image) first.
    """
    IMAGE = 'image'
    PATCH = 'patch'
    PIXEL = 'pixel'

    @property
    def rank(self):
        "Position in the hierarchy; higher means more global."
        return _LEVEL_RANK[self]

    @classmethod
    def parse(cls, value):
        """
        Parse a level from a :class:`Level` or its (case-insensitive) name.

        >>> Level.parse('Patch')
        <Level.PATCH: 'patch'>
        """
        if isinstance(value, Level):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError('unknown level {!r}'.format(value))


_LEVEL_RANK = {Level.IMAGE: 3, Level.PATCH: 2, Level.PIXEL: 1}

LEVELS = (Level.IMAGE, Level.PATCH, Level.PIXEL)
