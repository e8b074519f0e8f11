"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericsError -> 2,
CheckpointCorruptError and OSError -> 3, CheckpointVersionError -> 1.
"""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class NumericsError(RuntimeError):
    """Non-finite loss or other numeric failure during training."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointCorruptError(CheckpointError):
    """Stored checksum does not match the checkpoint contents."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""
