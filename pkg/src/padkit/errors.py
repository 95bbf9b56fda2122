"""Exception hierarchy shared across the package.

Every error the library raises deliberately derives from :class:`PadkitError`
so the CLI can report failures as machine-readable JSON and exit nonzero.
"""

from __future__ import annotations


class PadkitError(Exception):
    """Base class for all errors raised by padkit."""


class FormatError(PadkitError):
    """A feature file or checkpoint does not conform to its binary format."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File declares a format version this build cannot parse."""


class TruncatedPayloadError(FormatError):
    """File is shorter (or longer) than the header-declared payload."""


class RecordInvariantError(FormatError):
    """Parsed or constructed record violates a structural invariant."""


class NonFiniteFeaturesError(RecordInvariantError):
    """Feature tensor contains NaN or Inf."""


class ChecksumError(FormatError):
    """Checkpoint content checksum does not match the stored digest."""


class ManifestError(PadkitError):
    """Dataset manifest is missing, malformed, or violates the one-class rule."""


class ConfigError(PadkitError):
    """Invalid configuration value or combination of settings."""


class ShapeError(PadkitError):
    """Tensor shape does not match what the operation requires."""


class NonFiniteComputationError(PadkitError):
    """A forward/backward stage or gradient produced NaN or Inf."""

    def __init__(self, stage: str, message: str | None = None):
        self.stage = stage
        super().__init__(message or f"non-finite values detected in stage '{stage}'")


class EvaluationError(PadkitError):
    """Metric cannot be computed from the given inputs."""
