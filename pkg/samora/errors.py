"""
Exceptions and warnings raised by SAMora components.
"""


class SamoraError(Exception):
    """
    Base class for SAMora errors.
    """
    pass


class ConfigError(SamoraError, ValueError):
    """
    Invalid configuration: unknown keys, missing adapters, duplicate levels,
    unsupported fusion orders, and the like.
    """
    pass


class DimensionError(SamoraError, ValueError):
    """
    Tensor shapes do not agree with each other or with the model configuration.
    """
    pass


class CheckpointError(SamoraError, IOError):
    """
    A checkpoint could not be read or does not match its manifest.  The message
    always names the offending tensor when there is one.
    """
    pass


class ProtocolError(SamoraError, ValueError):
    """
    The evaluation protocol was violated (e.g. a test volume has missing slices).
    """
    pass


class FrozenModelError(SamoraError, RuntimeError):
    """
    A model that must be frozen still has trainable parameters.
    """
    pass


class DataError(SamoraError, ValueError):
    """
    Input data cannot be loaded, such as an empty slice directory.
    """
    pass


class DataWarning(UserWarning):
    """
    Warning raised for detectable problems with input data.
    """
    pass
