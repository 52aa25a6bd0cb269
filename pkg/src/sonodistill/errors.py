"""Error taxonomy and process exit codes.

Exit code contract: 0 success, 2 usage/configuration, 3 numeric failure,
4 I/O failure. The CLI maps exceptions to codes via ``exit_code``.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class SonodistillError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SonodistillError):
    """Invalid configuration, option, or input schema (exit 2)."""

    exit_code = EXIT_CONFIG


class IngestionError(ConfigError):
    """Dataset manifest or mask violates an invariant; names the record."""


class IncompatibleCheckpointError(ConfigError):
    """Checkpoint format version or config block does not match expectations."""


class NumericError(SonodistillError):
    """Non-finite values or numerically invalid inputs (exit 3)."""

    exit_code = EXIT_NUMERIC


class ArtifactIOError(SonodistillError):
    """Filesystem failure while reading or writing artifacts (exit 4)."""

    exit_code = EXIT_IO


class CheckpointReadError(ArtifactIOError):
    """Checkpoint file is truncated or otherwise unreadable."""
